//! Classification and box-regression objectives.
//!
//! Scores `p` are probabilities and are clamped to `[eps, 1 - eps]` before any
//! logarithm; the clamp has zero derivative outside that range.

pub mod dual;

use serde::{Deserialize, Serialize};

pub use crate::boxes::iou;
use crate::boxes::Bbox;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use dual::{Dual4, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    /// Sum divided by `max(1, number of positives)`.
    #[default]
    MeanOverPositives,
}

impl Reduction {
    fn divisor(self, positives: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::MeanOverPositives => positives.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VflParams {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub reduction: Reduction,
}

impl Default for VflParams {
    fn default() -> Self {
        VflParams {
            alpha: 0.75,
            gamma: 2.0,
            epsilon: 1e-7,
            reduction: Reduction::MeanOverPositives,
        }
    }
}

impl VflParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("vfl alpha {} outside (0, 1]", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("vfl gamma {} must be >= 0", self.gamma)));
        }
        check_epsilon(self.epsilon)
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1e-3) {
        return Err(Error::Config(format!("probability clamp {eps} outside (0, 1e-3)")));
    }
    Ok(())
}

/// A predicted score and its target quality; `q > 0` marks a positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTarget {
    pub p: f64,
    pub q: f64,
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Domain(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

fn clamp(p: f64, eps: f64) -> (f64, bool) {
    let c = p.clamp(eps, 1.0 - eps);
    (c, c == p)
}

/// `x * ln(y)` with `0 * ln(anything) = 0`.
fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Per-sample varifocal value and its derivative with respect to `p`.
pub fn varifocal_term(p: f64, q: f64, params: &VflParams) -> (f64, f64) {
    let (pc, inside) = clamp(p, params.epsilon);
    let (value, grad) = if q > 0.0 {
        let value = -q * (xlogy(q, pc) + xlogy(1.0 - q, 1.0 - pc));
        let grad = -q * (q / pc - (1.0 - q) / (1.0 - pc));
        (value, grad)
    } else {
        let (a, g) = (params.alpha, params.gamma);
        let pg = pc.powf(g);
        let l1 = (1.0 - pc).ln();
        let value = -a * pg * l1;
        let dpg = if g == 0.0 { 0.0 } else { g * pc.powf(g - 1.0) };
        let grad = -a * (dpg * l1 - pg / (1.0 - pc));
        (value, grad)
    };
    (value, if inside { grad } else { 0.0 })
}

/// Reduced varifocal loss over explicit `(p, q)` pairs.
pub fn varifocal_value(pairs: &[ScoreTarget], params: &VflParams) -> Result<f64> {
    params.validate()?;
    let mut total = 0.0;
    let mut positives = 0;
    for st in pairs {
        unit_interval("p", st.p)?;
        unit_interval("q", st.q)?;
        positives += usize::from(st.q > 0.0);
        total += varifocal_term(st.p, st.q, params).0;
    }
    Ok(total / params.reduction.divisor(positives))
}

fn elementwise_loss(
    tape: &mut Tape,
    scores: Var,
    targets: &[f64],
    divisor: f64,
    term: impl Fn(f64, f64) -> (f64, f64),
) -> Result<Var> {
    let p = tape.value(scores);
    if p.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "loss: {} scores but {} targets",
            p.len(),
            targets.len()
        )));
    }
    for (&pv, &tv) in p.data().iter().zip(targets) {
        unit_interval("p", pv)?;
        unit_interval("target", tv)?;
    }
    let mut total = 0.0;
    let mut local = Vec::with_capacity(p.len());
    for (&pv, &tv) in p.data().iter().zip(targets) {
        let (v, g) = term(pv, tv);
        total += v;
        local.push(g / divisor);
    }
    let shape = p.shape();
    Ok(tape.custom(
        &[scores],
        Tensor::scalar(total / divisor),
        Box::new(move |g, _| {
            let g0 = g.data()[0];
            vec![Tensor::new(shape, local.iter().map(|d| d * g0).collect()).expect("loss grad shape")]
        }),
    ))
}

/// Differentiable varifocal loss of a probability tensor against per-element
/// target qualities (same element count).
pub fn varifocal_loss(tape: &mut Tape, scores: Var, q: &[f64], params: &VflParams) -> Result<Var> {
    params.validate()?;
    let positives = q.iter().filter(|&&v| v > 0.0).count();
    let params = *params;
    elementwise_loss(tape, scores, q, params.reduction.divisor(positives), move |p, t| {
        varifocal_term(p, t, &params)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
    /// Weight negatives by `alpha` instead of `1 - alpha`.
    pub alpha_on_negative: bool,
    pub epsilon: f64,
    pub reduction: Reduction,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
            alpha_on_negative: false,
            epsilon: 1e-7,
            reduction: Reduction::MeanOverPositives,
        }
    }
}

/// Per-sample focal value and derivative with respect to `p`.
pub fn focal_term(p: f64, positive: bool, params: &FocalParams) -> (f64, f64) {
    let (pc, inside) = clamp(p, params.epsilon);
    let g = params.gamma;
    let (value, grad) = if positive {
        let w = params.alpha;
        let m = (1.0 - pc).powf(g);
        let dm = if g == 0.0 { 0.0 } else { -g * (1.0 - pc).powf(g - 1.0) };
        (-w * m * pc.ln(), -w * (dm * pc.ln() + m / pc))
    } else {
        let w = if params.alpha_on_negative { params.alpha } else { 1.0 - params.alpha };
        let m = pc.powf(g);
        let dm = if g == 0.0 { 0.0 } else { g * pc.powf(g - 1.0) };
        let l1 = (1.0 - pc).ln();
        (-w * m * l1, -w * (dm * l1 - m / (1.0 - pc)))
    };
    (value, if inside { grad } else { 0.0 })
}

/// Scalar focal loss for one prediction.
pub fn focal_loss(p: f64, y: bool, alpha: f64, gamma: f64, alpha_on_negative: bool) -> Result<f64> {
    unit_interval("p", p)?;
    let params = FocalParams {
        alpha,
        gamma,
        alpha_on_negative,
        ..FocalParams::default()
    };
    Ok(focal_term(p, y, &params).0)
}

/// Differentiable focal loss against binary labels (`> 0` is positive).
pub fn focal_loss_tape(tape: &mut Tape, scores: Var, labels: &[f64], params: &FocalParams) -> Result<Var> {
    check_epsilon(params.epsilon)?;
    let positives = labels.iter().filter(|&&v| v > 0.0).count();
    let params = *params;
    elementwise_loss(tape, scores, labels, params.reduction.divisor(positives), move |p, t| {
        focal_term(p, t > 0.0, &params)
    })
}

/// Binary cross-entropy value and derivative for a soft target.
pub fn bce_term(p: f64, target: f64, epsilon: f64) -> (f64, f64) {
    let (pc, inside) = clamp(p, epsilon);
    let value = -(xlogy(target, pc) + xlogy(1.0 - target, 1.0 - pc));
    let grad = -(target / pc - (1.0 - target) / (1.0 - pc));
    (value, if inside { grad } else { 0.0 })
}

/// Differentiable BCE against soft targets in `[0, 1]`.
pub fn bce_loss(tape: &mut Tape, scores: Var, targets: &[f64], epsilon: f64, reduction: Reduction) -> Result<Var> {
    check_epsilon(epsilon)?;
    let positives = targets.iter().filter(|&&v| v > 0.0).count();
    elementwise_loss(tape, scores, targets, reduction.divisor(positives), move |p, t| {
        bce_term(p, t, epsilon)
    })
}

const CIOU_EPS: f64 = 1e-9;

/// Complete-IoU loss `1 - IoU + rho^2 / c^2 + alpha * v`, generic over the
/// scalar type so it can be evaluated on dual numbers.
pub fn ciou_generic<T: Real>(pred: [T; 4], gt: &Bbox) -> T {
    let [px1, py1, px2, py2] = pred;
    let [gx1, gy1, gx2, gy2] = gt.to_array().map(T::cst);
    let zero = T::cst(0.0);
    let one = T::cst(1.0);
    let half = T::cst(0.5);

    let iw = (px2.min(gx2) - px1.max(gx1)).max(zero);
    let ih = (py2.min(gy2) - py1.max(gy1)).max(zero);
    let inter = iw * ih;
    let (pw, ph) = (px2 - px1, py2 - py1);
    let (gw, gh) = (gx2 - gx1, gy2 - gy1);
    let union = pw * ph + gw * gh - inter;
    let iou = if union.val() <= 0.0 { zero } else { inter / union };

    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let diag = cw.square() + ch.square() + T::cst(CIOU_EPS);
    let rho = ((px1 + px2) * half - (gx1 + gx2) * half).square() + ((py1 + py2) * half - (gy1 + gy2) * half).square();

    let k = T::cst(4.0 / (std::f64::consts::PI * std::f64::consts::PI));
    let v = k * (gw.atan2(gh) - pw.atan2(ph)).square();
    let alpha = v / (one - iou + v + T::cst(CIOU_EPS));
    one - iou + rho / diag + alpha * v
}

pub fn ciou_loss(pred: &Bbox, gt: &Bbox) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    Ok(ciou_generic(pred.to_array(), gt))
}

/// CIoU value and its gradient with respect to `(x_min, y_min, x_max, y_max)` of `pred`.
pub fn ciou_loss_grad(pred: &Bbox, gt: &Bbox) -> Result<(f64, [f64; 4])> {
    pred.validate()?;
    gt.validate()?;
    let p = pred.to_array();
    let d = ciou_generic(std::array::from_fn(|i| Dual4::var(p[i], i)), gt);
    Ok((d.v, d.d))
}

/// Differentiable sum of CIoU losses. `boxes` holds `4 * gts.len()` corner
/// coordinates in `(x_min, y_min, x_max, y_max)` order.
pub fn ciou_loss_tape(tape: &mut Tape, boxes: Var, gts: &[Bbox]) -> Result<Var> {
    let value = tape.value(boxes).clone();
    if value.len() != 4 * gts.len() {
        return Err(Error::Dimension(format!(
            "ciou_loss_tape: {} coordinates for {} boxes",
            value.len(),
            gts.len()
        )));
    }
    let mut total = 0.0;
    let mut local = Vec::with_capacity(value.len());
    for (chunk, gt) in value.data().chunks_exact(4).zip(gts) {
        let pred = Bbox::new(chunk[0], chunk[1], chunk[2], chunk[3]);
        let (v, g) = ciou_loss_grad(&pred, gt)?;
        total += v;
        local.extend(g);
    }
    let shape = value.shape();
    Ok(tape.custom(
        &[boxes],
        Tensor::scalar(total),
        Box::new(move |g, _| {
            let g0 = g.data()[0];
            vec![Tensor::new(shape, local.iter().map(|d| d * g0).collect()).expect("ciou grad shape")]
        }),
    ))
}
