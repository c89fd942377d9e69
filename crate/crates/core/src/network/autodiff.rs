//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already a topological order and the backward sweep just walks it in reverse.
//! Parameters enter the graph as copies of the stored tensors; their gradients
//! come back keyed by name through [`Gradients`].

use std::collections::HashMap;

use super::kernels::{col2im_add, gemm, im2col, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStat {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Shape split around a distinguished axis: `(outer, axis_len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

enum Op {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        in_dims: [usize; 3],
        out_dims: [usize; 3],
        cols: Vec<f64>,
    },
    Deconv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        in_dims: [usize; 3],
        out_dims: [usize; 3],
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Square(NodeId),
    SmoothL1(NodeId),
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    Pow {
        x: NodeId,
        exponent: f64,
    },
    Affine {
        x: NodeId,
        scale: Vec<f64>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    SegmentMax {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    ScatterRows {
        x: NodeId,
        cells: Vec<usize>,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Reshape(NodeId),
    Select {
        x: NodeId,
        idx: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation.
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
    params: HashMap<String, NodeId>,
    bn_stats: Vec<BatchStat>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records enough state for [`Graph::backward`].
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
            params: HashMap::new(),
            bn_stats: Vec::new(),
        }
    }

    /// A forward-only graph; caches for the backward pass are not kept.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            ..Graph::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Batch statistics gathered by training-mode batch norms, in creation order.
    pub fn batch_stats(&self) -> &[BatchStat] {
        &self.bn_stats
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn req(&self, ids: &[NodeId]) -> bool {
        self.recording && ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::State(format!("node {} is not part of this graph", id.0)))
        }
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value.without_grad(), Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::node`].
    pub fn input_with_grad(&mut self, value: Tensor) -> NodeId {
        let rg = self.recording;
        self.push(value.without_grad(), Op::Leaf, rg)
    }

    /// Named trainable parameter. Repeated calls with the same name share one node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let rg = self.recording;
        let id = self.push(value.without_grad(), Op::Leaf, rg);
        self.params.insert(name.to_string(), id);
        id
    }

    /// 3D convolution of `x: [Cin, D, H, W]` with `w: [Cout, Cin, kd, kh, kw]`.
    pub fn conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    ) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 5 {
            return Err(Error::Structural(format!(
                "conv expects input rank 4 and weight rank 5, got {xs:?} and {ws:?}"
            )));
        }
        let (cin, cout) = (xs[0], ws[0]);
        if ws[1] != cin || ws[2..] != geom.kernel {
            return Err(Error::Structural(format!(
                "conv weight {ws:?} does not fit input channels {cin} and kernel {:?}",
                geom.kernel
            )));
        }
        let in_dims = [xs[1], xs[2], xs[3]];
        let out_dims = geom.conv_out(in_dims).ok_or_else(|| {
            Error::Structural(format!(
                "conv kernel {:?} does not fit input {in_dims:?}",
                geom.kernel
            ))
        })?;
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != [cout] {
                return Err(Error::Structural(format!(
                    "conv bias {:?} for {cout} filters",
                    self.shape(b)
                )));
            }
        }
        let n: usize = out_dims.iter().product();
        let k = cin * geom.kernel_volume();
        let cols = im2col(self.value(x).data(), cin, in_dims, &geom, out_dims);
        let mut out = vec![0.0; cout * n];
        if let Some(b) = b {
            for (c, row) in out.chunks_mut(n).enumerate() {
                row.fill(self.value(b).data()[c]);
            }
        }
        gemm(cout, k, n, 1.0, self.value(w).data(), false, &cols, false, 1.0, &mut out);
        let value = Tensor::new(vec![cout, out_dims[0], out_dims[1], out_dims[2]], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.req(&parents);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                geom,
                in_dims,
                out_dims,
                cols,
            },
            rg,
        ))
    }

    /// Transposed 3D convolution of `x: [Cin, D, H, W]` with `w: [Cin, Cout, kd, kh, kw]`,
    /// cropped to `out_dims` (the `geom.padding` offset is removed on the low side).
    pub fn deconv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        out_dims: [usize; 3],
    ) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 5 {
            return Err(Error::Structural(format!(
                "deconv expects input rank 4 and weight rank 5, got {xs:?} and {ws:?}"
            )));
        }
        let (cin, cout) = (xs[0], ws[1]);
        if ws[0] != cin || ws[2..] != geom.kernel {
            return Err(Error::Structural(format!(
                "deconv weight {ws:?} does not fit input channels {cin} and kernel {:?}",
                geom.kernel
            )));
        }
        let in_dims = [xs[1], xs[2], xs[3]];
        // the forward conv with this geometry must map out_dims back onto in_dims
        if geom.conv_out(out_dims) != Some(in_dims) {
            return Err(Error::Structural(format!(
                "deconv output {out_dims:?} is inconsistent with input {in_dims:?} and {geom:?}"
            )));
        }
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != [cout] {
                return Err(Error::Structural(format!(
                    "deconv bias {:?} for {cout} filters",
                    self.shape(b)
                )));
            }
        }
        let nin: usize = in_dims.iter().product();
        let nout: usize = out_dims.iter().product();
        let kc = cout * geom.kernel_volume();
        let mut cols = vec![0.0; kc * nin];
        gemm(kc, cin, nin, 1.0, self.value(w).data(), true, self.value(x).data(), false, 0.0, &mut cols);
        let mut out = vec![0.0; cout * nout];
        if let Some(b) = b {
            for (c, row) in out.chunks_mut(nout).enumerate() {
                row.fill(self.value(b).data()[c]);
            }
        }
        col2im_add(&cols, cout, out_dims, &geom, in_dims, &mut out);
        let value = Tensor::new(vec![cout, out_dims[0], out_dims[1], out_dims[2]], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.req(&parents);
        Ok(self.push(
            value,
            Op::Deconv {
                x,
                w,
                b,
                geom,
                in_dims,
                out_dims,
            },
            rg,
        ))
    }

    /// Row-wise affine map: `x: [N, Cin]`, `w: [Cout, Cin]` gives `[N, Cout]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Structural(format!(
                "linear expects [N, C] x [F, C], got {xs:?} and {ws:?}"
            )));
        }
        let (n, cin, cout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * cout];
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != [cout] {
                return Err(Error::Structural(format!(
                    "linear bias {:?} for {cout} outputs",
                    self.shape(b)
                )));
            }
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(self.value(b).data());
            }
        }
        gemm(n, cin, cout, 1.0, self.value(x).data(), false, self.value(w).data(), true, 1.0, &mut out);
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.req(&parents);
        Ok(self.push(Tensor::new(vec![n, cout], out)?, Op::Linear { x, w, b }, rg))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        self.check(x)?;
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.req(&[x]);
        Ok(self.push(value, op, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Huber penalty with transition at 1: `0.5 d^2` inside, `|d| - 0.5` outside.
    pub fn smooth_l1(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, smooth_l1_scalar, Op::SmoothL1(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn pow_scalar(&mut self, x: NodeId, exponent: f64) -> Result<NodeId> {
        self.unary(x, |v| v.powf(exponent), Op::Pow { x, exponent })
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    /// Element-wise `scale[i] * x[i] + shift[i]`.
    pub fn affine(&mut self, x: NodeId, scale: Vec<f64>, shift: &[f64]) -> Result<NodeId> {
        self.check(x)?;
        let src = self.value(x);
        if scale.len() != src.len() || shift.len() != src.len() {
            return Err(Error::Structural(format!(
                "affine coefficients of length {}/{} for {} values",
                scale.len(),
                shift.len(),
                src.len()
            )));
        }
        let data = src
            .data()
            .iter()
            .zip(&scale)
            .zip(shift)
            .map(|((v, a), b)| a * v + b)
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.req(&[x]);
        Ok(self.push(value, Op::Affine { x, scale }, rg))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::Structural(format!(
                "element-wise op on shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.req(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let s = self.value(x).data().iter().sum();
        let rg = self.req(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    /// Batch normalization over every axis except `axis`.
    ///
    /// With `running = None` the node normalizes with the statistics of `x` itself
    /// and records them under `stat_name`; otherwise it applies the given running
    /// `(mean, var)` as a fixed affine map.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        axis: usize,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
        stat_name: &str,
    ) -> Result<NodeId> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Structural(format!(
                "batch norm axis {axis} for shape {shape:?}"
            )));
        }
        let (outer, c, inner) = split_axis(&shape, axis);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Structural(format!(
                "batch norm parameters {:?}/{:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let m = outer * inner;
        let xv = self.value(x).data();
        let training = running.is_none();
        let (mean, var) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::Structural(format!(
                        "running statistics of length {}/{} for {c} channels",
                        rm.len(),
                        rv.len()
                    )));
                }
                (rm.to_vec(), rv.to_vec())
            }
            None => {
                if m == 0 {
                    return Err(Error::Domain("batch norm over an empty batch".into()));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        mean[ch] += xv[base..base + inner].iter().sum::<f64>();
                    }
                }
                for v in mean.iter_mut() {
                    *v /= m as f64;
                }
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        var[ch] += xv[base..base + inner]
                            .iter()
                            .map(|v| (v - mean[ch]) * (v - mean[ch]))
                            .sum::<f64>();
                    }
                }
                for v in var.iter_mut() {
                    *v /= m as f64;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        if training {
            self.bn_stats.push(BatchStat {
                name: stat_name.to_string(),
                mean,
                var,
                count: m,
            });
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.req(&[x, gamma, beta]);
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
                training,
            },
            rg,
        ))
    }

    /// Column-wise maximum of `x: [P, C]` within each segment; `segments[p]` names
    /// the segment of row `p`. Ties resolve to the lowest row index.
    pub fn segment_max(
        &mut self,
        x: NodeId,
        segments: &[usize],
        n_segments: usize,
    ) -> Result<NodeId> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != segments.len() {
            return Err(Error::Structural(format!(
                "segment max over {xs:?} with {} segment ids",
                segments.len()
            )));
        }
        let c = xs[1];
        let xv = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; n_segments * c];
        let mut argmax = vec![usize::MAX; n_segments * c];
        for (p, &s) in segments.iter().enumerate() {
            if s >= n_segments {
                return Err(Error::Structural(format!(
                    "segment id {s} out of range {n_segments}"
                )));
            }
            for ch in 0..c {
                let v = xv[p * c + ch];
                let slot = s * c + ch;
                if argmax[slot] == usize::MAX || v > out[slot] {
                    out[slot] = v;
                    argmax[slot] = p;
                }
            }
        }
        if c > 0 && argmax.contains(&usize::MAX) {
            return Err(Error::Domain("segment max over an empty segment".into()));
        }
        let value = Tensor::new(vec![n_segments, c], out)?;
        let rg = self.req(&[x]);
        Ok(self.push(value, Op::SegmentMax { x, argmax }, rg))
    }

    /// Row gather: output row `i` is row `rows[i]` of `x: [V, C]`.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::Structural(format!("gather_rows on shape {xs:?}")));
        }
        let c = xs[1];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= xs[0] {
                return Err(Error::Structural(format!("row {r} out of range {}", xs[0])));
            }
            out.extend_from_slice(&xv[r * c..(r + 1) * c]);
        }
        let value = Tensor::new(vec![rows.len(), c], out)?;
        let rg = self.req(&[x]);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Scatters rows of `x: [V, C]` into a zero `[C, spatial...]` volume at flat
    /// cell indices `cells`. Duplicate cells are rejected.
    pub fn scatter_rows(&mut self, x: NodeId, cells: &[usize], spatial: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != cells.len() {
            return Err(Error::Structural(format!(
                "scatter of {xs:?} into {} cells",
                cells.len()
            )));
        }
        let c = xs[1];
        let s: usize = spatial.iter().product();
        let mut seen = vec![false; s];
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * s];
        for (v, &cell) in cells.iter().enumerate() {
            if cell >= s {
                return Err(Error::Structural(format!("cell {cell} out of range {s}")));
            }
            if std::mem::replace(&mut seen[cell], true) {
                return Err(Error::Structural(format!("duplicate scatter cell {cell}")));
            }
            for ch in 0..c {
                out[ch * s + cell] = xv[v * c + ch];
            }
        }
        let mut shape = vec![c];
        shape.extend_from_slice(spatial);
        let value = Tensor::new(shape, out)?;
        let rg = self.req(&[x]);
        Ok(self.push(
            value,
            Op::ScatterRows {
                x,
                cells: cells.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Structural("concat of zero tensors".into()))?;
        for &i in inputs {
            self.check(i)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Structural(format!("concat axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &i in inputs {
            let s = self.shape(i);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::Structural(format!(
                    "concat of {base:?} with {s:?} along axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in inputs {
                let len = self.shape(i)[axis] * inner;
                out.extend_from_slice(&self.value(i).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = self.req(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.check(x)?;
        let value = self.value(x).without_grad().reshape(shape)?;
        let rg = self.req(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Flat gather of individual elements into a rank-1 tensor.
    pub fn select(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            out.push(*xv.get(i).ok_or_else(|| {
                Error::Structural(format!("select index {i} out of range {}", xv.len()))
            })?);
        }
        let value = Tensor::new(vec![idx.len()], out)?;
        let rg = self.req(&[x]);
        Ok(self.push(
            value,
            Op::Select {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from the scalar `output`, seeded with `d output = seed`.
    pub fn backward(&self, output: NodeId, seed: f64) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::State(
                "backward on a graph built without gradient recording".into(),
            ));
        }
        if self.nodes.is_empty() {
            return Err(Error::State("backward before any forward computation".into()));
        }
        self.check(output)?;
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::Structural(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![seed]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let mut params: Vec<(String, NodeId)> =
            self.params.iter().map(|(k, v)| (k.clone(), *v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Vec<f64>>], id: NodeId, delta: Vec<f64>| {
            match &mut grads[id.0] {
                Some(existing) => {
                    for (a, b) in existing.iter_mut().zip(&delta) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let elementwise = |grads: &mut [Option<Vec<f64>>], x: NodeId, f: &dyn Fn(usize) -> f64| {
            let d: Vec<f64> = (0..g.len()).map(|j| g[j] * f(j)).collect();
            acc(grads, x, d);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                geom,
                in_dims,
                out_dims,
                cols,
            } => {
                let cin = self.shape(*x)[0];
                let cout = node.value.shape()[0];
                let n: usize = out_dims.iter().product();
                let k = cin * geom.kernel_volume();
                if self.wants(*w) {
                    let mut dw = vec![0.0; cout * k];
                    gemm(cout, n, k, 1.0, g, false, cols, true, 0.0, &mut dw);
                    acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = g.chunks(n).map(|r| r.iter().sum()).collect();
                        acc(grads, *b, db);
                    }
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; k * n];
                    gemm(k, cout, n, 1.0, self.value(*w).data(), true, g, false, 0.0, &mut dcols);
                    let mut dx = vec![0.0; self.value(*x).len()];
                    col2im_add(&dcols, cin, *in_dims, geom, *out_dims, &mut dx);
                    acc(grads, *x, dx);
                }
            }
            Op::Deconv {
                x,
                w,
                b,
                geom,
                in_dims,
                out_dims,
            } => {
                let cin = self.shape(*x)[0];
                let cout = node.value.shape()[0];
                let nin: usize = in_dims.iter().product();
                let nout: usize = out_dims.iter().product();
                let kc = cout * geom.kernel_volume();
                let dcols = im2col(g, cout, *out_dims, geom, *in_dims);
                if self.wants(*w) {
                    let mut dw = vec![0.0; cin * kc];
                    gemm(cin, nin, kc, 1.0, self.value(*x).data(), false, &dcols, true, 0.0, &mut dw);
                    acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = g.chunks(nout).map(|r| r.iter().sum()).collect();
                        acc(grads, *b, db);
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; cin * nin];
                    gemm(cin, kc, nin, 1.0, self.value(*w).data(), false, &dcols, false, 0.0, &mut dx);
                    acc(grads, *x, dx);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, cin) = (xs[0], xs[1]);
                let cout = node.value.shape()[1];
                if self.wants(*w) {
                    let mut dw = vec![0.0; cout * cin];
                    gemm(cout, n, cin, 1.0, g, true, self.value(*x).data(), false, 0.0, &mut dw);
                    acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; cout];
                        for row in g.chunks(cout) {
                            for (a, v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        acc(grads, *b, db);
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * cin];
                    gemm(n, cout, cin, 1.0, g, false, self.value(*w).data(), false, 0.0, &mut dx);
                    acc(grads, *x, dx);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                elementwise(grads, *x, &|j| if xv[j] > 0.0 { 1.0 } else { 0.0 });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                elementwise(grads, *x, &|j| y[j] * (1.0 - y[j]));
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                elementwise(grads, *x, &|j| 1.0 / xv[j]);
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                elementwise(grads, *x, &|j| 2.0 * xv[j]);
            }
            Op::SmoothL1(x) => {
                let xv = self.value(*x).data();
                elementwise(grads, *x, &|j| {
                    let d = xv[j];
                    if d.abs() < 1.0 {
                        d
                    } else {
                        d.signum()
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                elementwise(grads, *x, &|j| {
                    if xv[j] >= *lo && xv[j] <= *hi {
                        1.0
                    } else {
                        0.0
                    }
                });
            }
            Op::Pow { x, exponent } => {
                let xv = self.value(*x).data();
                let e = *exponent;
                elementwise(grads, *x, &|j| {
                    if e == 0.0 {
                        0.0
                    } else {
                        e * xv[j].powf(e - 1.0)
                    }
                });
            }
            Op::Affine { x, scale } => {
                elementwise(grads, *x, &|j| scale[j]);
            }
            Op::Scale(x, s) => {
                elementwise(grads, *x, &|_| *s);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    acc(grads, *a, g.iter().zip(bv).map(|(d, v)| d * v).collect());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.iter().zip(av).map(|(d, v)| d * v).collect());
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(grads, *x, vec![g[0]; n]);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
                training,
            } => {
                let (outer, c, inner) = split_axis(node.value.shape(), *axis);
                let m = (outer * inner) as f64;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for j in base..base + inner {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for j in base..base + inner {
                                dx[j] = if *training {
                                    gv[ch] * inv_std[ch] / m
                                        * (m * g[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                } else {
                                    g[j] * gv[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    acc(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    acc(grads, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    acc(grads, *beta, dbeta);
                }
            }
            Op::SegmentMax { x, argmax } => {
                let c = node.value.shape()[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (slot, &p) in argmax.iter().enumerate() {
                    dx[p * c + slot % c] += g[slot];
                }
                acc(grads, *x, dx);
            }
            Op::GatherRows { x, rows } => {
                let c = node.value.shape()[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for ch in 0..c {
                        dx[r * c + ch] += g[i * c + ch];
                    }
                }
                acc(grads, *x, dx);
            }
            Op::ScatterRows { x, cells } => {
                let c = self.shape(*x)[1];
                let s = node.value.len() / c.max(1);
                let mut dx = vec![0.0; self.value(*x).len()];
                for (v, &cell) in cells.iter().enumerate() {
                    for ch in 0..c {
                        dx[v * c + ch] = g[ch * s + cell];
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for &inp in inputs {
                    let len = self.shape(inp)[*axis];
                    if self.wants(inp) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g[start..start + len * inner]);
                        }
                        acc(grads, inp, d);
                    }
                    offset += len;
                }
            }
            Op::Reshape(x) => acc(grads, *x, g.to_vec()),
            Op::Select { x, idx } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (j, &i) in idx.iter().enumerate() {
                    dx[i] += g[j];
                }
                acc(grads, *x, dx);
            }
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, NodeId)>,
}

impl Gradients {
    /// Gradient of any node that required one (inputs created with `input_with_grad`).
    pub fn node(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a named parameter; `None` if the parameter was not reached.
    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, id)| self.node(*id))
    }

    /// `(name, gradient)` for every parameter in the graph, sorted by name.
    /// Parameters the sweep did not reach have no entry.
    pub fn params(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.params
            .iter()
            .filter_map(|(n, id)| self.node(*id).map(|g| (n.as_str(), g)))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn smooth_l1_scalar(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}
