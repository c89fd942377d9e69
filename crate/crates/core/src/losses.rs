//! Binary cross entropy, focal loss and the composite detection loss.
//!
//! The scalar functions here carry closed-form derivatives with respect to the
//! logit. The composite loss is assembled from primitive autodiff nodes, so its
//! gradient comes from the graph and can be checked against the closed forms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::autodiff::{sigmoid, smooth_l1_scalar, Graph, NodeId};
use crate::network::Tensor;
use crate::train::targets::{AnchorLabel, TargetAssignment};

/// Lower clamp on `p_t` (and `1 - p_t`) before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// Ground-truth class of a sample, `y = +1` or `y = -1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Class {
    Positive,
    Negative,
}

impl Class {
    pub fn sign(self) -> f64 {
        match self {
            Class::Positive => 1.0,
            Class::Negative => -1.0,
        }
    }

    pub fn from_sign(y: i32) -> Result<Self> {
        match y {
            1 => Ok(Class::Positive),
            -1 => Ok(Class::Negative),
            other => Err(Error::Domain(format!("class label must be +1 or -1, got {other}"))),
        }
    }
}

/// One classification sample: class, logit (when known), `p = sigmoid(x)` and the
/// posterior `p_t` of the true class, clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSample {
    y: Class,
    x: Option<f64>,
    p: f64,
    p_t: f64,
}

impl LossSample {
    pub fn from_logit(y: Class, x: f64) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::Domain(format!("non-finite logit {x}")));
        }
        let p = sigmoid(x);
        // sigmoid(y x) avoids the cancellation in 1 - sigmoid(x) for negatives
        let p_t = sigmoid(y.sign() * x);
        Ok(LossSample {
            y,
            x: Some(x),
            p,
            p_t: p_t.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP),
        })
    }

    pub fn from_probability(y: Class, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
        }
        let p_t = match y {
            Class::Positive => p,
            Class::Negative => 1.0 - p,
        };
        Ok(LossSample {
            y,
            x: None,
            p,
            p_t: p_t.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP),
        })
    }

    /// Sample described directly by its posterior.
    pub fn from_posterior(y: Class, p_t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_t) {
            return Err(Error::Domain(format!("posterior {p_t} outside [0, 1]")));
        }
        let p = match y {
            Class::Positive => p_t,
            Class::Negative => 1.0 - p_t,
        };
        Self::from_probability(y, p)
    }

    pub fn y(&self) -> Class {
        self.y
    }

    pub fn x(&self) -> Option<f64> {
        self.x
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn p_t(&self) -> f64 {
        self.p_t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Plain sums over anchors, unit class weights.
    Original,
    /// Per-class means weighted by alpha / beta, mean regression over positives.
    Enhanced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsKind {
    Bce,
    Focal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    Square,
    SmoothL1,
}

fn one() -> f64 {
    1.0
}

fn is_one(v: &f64) -> bool {
    *v == 1.0
}

/// Hyperparameters of the classification and composite losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    /// Weight of the positive classification term.
    pub alpha: f64,
    /// Weight of the negative classification term.
    pub beta: f64,
    /// Scale of the whole classification loss.
    pub eta: f64,
    /// Single-class weight for the scalar focal loss. Not used by the composite loss,
    /// where `alpha` / `beta` play this role per class.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub lambda: f64,
    pub mode: LossMode,
    pub cls_kind: ClsKind,
    pub reg_kind: RegKind,
}

impl LossConfig {
    /// Enhanced-loss settings used for 3D-FCN: alpha 1, beta 5, eta 10, square regression.
    pub fn fcn3d(gamma: f64) -> Self {
        LossConfig {
            gamma,
            alpha: 1.0,
            beta: 5.0,
            eta: 10.0,
            lambda: 1.0,
            mode: LossMode::Enhanced,
            cls_kind: if gamma > 0.0 { ClsKind::Focal } else { ClsKind::Bce },
            reg_kind: RegKind::Square,
        }
    }

    /// Settings used for VoxelNet: alpha 1, beta 10, eta 0.5, smooth-L1 regression.
    pub fn voxelnet(gamma: f64) -> Self {
        LossConfig {
            gamma,
            alpha: 1.0,
            beta: 10.0,
            eta: 0.5,
            lambda: 1.0,
            mode: LossMode::Enhanced,
            cls_kind: if gamma > 0.0 { ClsKind::Focal } else { ClsKind::Bce },
            reg_kind: RegKind::SmoothL1,
        }
    }

    /// Focal exponent in effect: zero when the classification kind is BCE.
    pub fn effective_gamma(&self) -> f64 {
        match self.cls_kind {
            ClsKind::Bce => 0.0,
            ClsKind::Focal => self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Domain(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("eta", self.eta),
            ("lambda", self.lambda),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma >= 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("focal exponent must be >= 0, got {gamma}")))
    }
}

/// `-ln(p_t)`.
pub fn bce(sample: &LossSample) -> f64 {
    -sample.p_t.ln()
}

/// `d bce / dx = y (p_t - 1)`.
pub fn bce_grad(sample: &LossSample) -> f64 {
    sample.y.sign() * (sample.p_t - 1.0)
}

/// `-lambda (1 - p_t)^gamma ln(p_t)`.
pub fn focal(sample: &LossSample, cfg: &LossConfig) -> Result<f64> {
    focal_with(sample, cfg.gamma, cfg.lambda)
}

/// `d focal / dx = lambda y (1 - p_t)^gamma (gamma p_t ln(p_t) + p_t - 1)`.
pub fn focal_grad(sample: &LossSample, cfg: &LossConfig) -> Result<f64> {
    check_gamma(cfg.gamma)?;
    let pt = sample.p_t;
    let w = (1.0 - pt).powf(cfg.gamma);
    Ok(cfg.lambda * sample.y.sign() * w * (cfg.gamma * pt * pt.ln() + pt - 1.0))
}

/// Focal loss for an explicit exponent and weight.
pub fn focal_with(sample: &LossSample, gamma: f64, lambda: f64) -> Result<f64> {
    check_gamma(gamma)?;
    let pt = sample.p_t;
    Ok(-(lambda * (1.0 - pt).powf(gamma) * pt.ln()))
}

fn check_lengths(u: &[f64], u_star: &[f64]) -> Result<()> {
    if u.len() == u_star.len() {
        Ok(())
    } else {
        Err(Error::Structural(format!(
            "residual lengths differ: {} vs {}",
            u.len(),
            u_star.len()
        )))
    }
}

/// `sum (u - u*)^2`.
pub fn square_loss(u: &[f64], u_star: &[f64]) -> Result<f64> {
    check_lengths(u, u_star)?;
    Ok(u.iter().zip(u_star).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Per-component Huber penalty with transition at 1, summed.
pub fn smooth_l1(u: &[f64], u_star: &[f64]) -> Result<f64> {
    check_lengths(u, u_star)?;
    Ok(u.iter().zip(u_star).map(|(a, b)| smooth_l1_scalar(a - b)).sum())
}

/// Values of every term of the composite loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub cls_pos: f64,
    pub cls_neg: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Graph nodes holding the composite loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub cls: NodeId,
    pub reg: NodeId,
    pub cls_pos: NodeId,
    pub cls_neg: NodeId,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |id: NodeId| g.value(id).data()[0];
        LossBreakdown {
            total: v(self.total),
            cls: v(self.cls),
            reg: v(self.reg),
            cls_pos: v(self.cls_pos),
            cls_neg: v(self.cls_neg),
            n_pos: self.n_pos,
            n_neg: self.n_neg,
        }
    }
}

/// Sum over selected logits of `-(1 - p_t)^gamma ln(p_t)`, scaled by `weight`.
fn classification_sum(
    g: &mut Graph,
    logits: NodeId,
    idx: &[usize],
    class: Class,
    gamma: f64,
    weight: f64,
) -> Result<NodeId> {
    let x = g.select(logits, idx)?;
    let p = g.sigmoid(x)?;
    let n = idx.len();
    let pt = match class {
        Class::Positive => p,
        Class::Negative => g.affine(p, vec![-1.0; n], &vec![1.0; n])?,
    };
    let pt = g.clamp(pt, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_pt = g.ln(pt)?;
    let per_sample = if gamma == 0.0 {
        log_pt
    } else {
        let one_minus = g.affine(pt, vec![-1.0; n], &vec![1.0; n])?;
        let modulator = g.pow_scalar(one_minus, gamma)?;
        g.mul(modulator, log_pt)?
    };
    let s = g.sum(per_sample)?;
    g.scale(s, -weight)
}

/// Builds the composite loss on top of prediction-map nodes.
///
/// `pmap` holds one logit per anchor (`[A, cells...]`), `rmap` holds
/// `residual_len` regression channels per anchor (`[A * L, cells...]`).
pub fn composite_loss_graph(
    g: &mut Graph,
    pmap: NodeId,
    rmap: NodeId,
    targets: &TargetAssignment,
    cfg: &LossConfig,
) -> Result<LossNodes> {
    cfg.validate()?;
    let layout = targets.layout;
    let (ps, rs) = (g.shape(pmap).to_vec(), g.shape(rmap).to_vec());
    let cells = layout.cells();
    let fits = |shape: &[usize], lead: usize| {
        !shape.is_empty() && shape[0] == lead && shape[1..].iter().product::<usize>() == cells
    };
    if !fits(&ps, layout.anchors_per_cell)
        || !fits(&rs, layout.anchors_per_cell * layout.residual_len)
        || targets.labels.len() != layout.anchors()
    {
        return Err(Error::Structural(format!(
            "prediction maps {ps:?} / {rs:?} do not match target layout {layout:?} \
             with {} labels",
            targets.labels.len()
        )));
    }
    let mut pos_idx = Vec::new();
    let mut neg_idx = Vec::new();
    for (a, l) in targets.labels.iter().enumerate() {
        match l {
            AnchorLabel::Positive => pos_idx.push(a),
            AnchorLabel::Negative => neg_idx.push(a),
            AnchorLabel::Ignore => {}
        }
    }
    let (n_pos, n_neg) = (pos_idx.len(), neg_idx.len());
    let gamma = cfg.effective_gamma();
    let (w_pos, w_neg, w_reg) = match cfg.mode {
        LossMode::Original => (1.0, 1.0, 1.0),
        LossMode::Enhanced => {
            let mean = |n: usize, w: f64| if n == 0 { 0.0 } else { w / n as f64 };
            (mean(n_pos, cfg.alpha), mean(n_neg, cfg.beta), mean(n_pos, 1.0))
        }
    };
    let cls_pos = classification_sum(g, pmap, &pos_idx, Class::Positive, gamma, w_pos)?;
    let cls_neg = classification_sum(g, pmap, &neg_idx, Class::Negative, gamma, w_neg)?;
    let both = g.add(cls_pos, cls_neg)?;
    let cls = g.scale(both, cfg.eta)?;

    let l = layout.residual_len;
    let mut reg_idx = Vec::with_capacity(n_pos * l);
    let mut reg_target = Vec::with_capacity(n_pos * l);
    for (anchor, residual) in &targets.positives {
        if residual.len() != l {
            return Err(Error::Structural(format!(
                "residual of length {} for layout length {l}",
                residual.len()
            )));
        }
        for (j, r) in residual.iter().enumerate() {
            reg_idx.push(layout.rmap_index(*anchor, j));
            reg_target.push(*r);
        }
    }
    if targets.positives.len() != n_pos {
        return Err(Error::Structural(format!(
            "{} residuals for {n_pos} positive anchors",
            targets.positives.len()
        )));
    }
    let u = g.select(rmap, &reg_idx)?;
    let u_star = g.input(Tensor::new(vec![reg_target.len()], reg_target)?);
    let diff = g.sub(u, u_star)?;
    let pen = match cfg.reg_kind {
        RegKind::Square => g.square(diff)?,
        RegKind::SmoothL1 => g.smooth_l1(diff)?,
    };
    let reg_sum = g.sum(pen)?;
    let reg = g.scale(reg_sum, w_reg)?;
    let total = g.add(cls, reg)?;
    Ok(LossNodes {
        total,
        cls,
        reg,
        cls_pos,
        cls_neg,
        n_pos,
        n_neg,
    })
}

/// Evaluates the composite loss on concrete prediction maps.
pub fn composite_loss(
    pmap_logits: &Tensor,
    rmap: &Tensor,
    targets: &TargetAssignment,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::inference();
    let p = g.input(pmap_logits.clone());
    let r = g.input(rmap.clone());
    let nodes = composite_loss_graph(&mut g, p, r, targets, cfg)?;
    Ok(nodes.breakdown(&g))
}
