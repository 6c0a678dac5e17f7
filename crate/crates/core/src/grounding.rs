//! Frame-wise grounding heads, their losses and top-n inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{interval_iou, Interval};
use crate::layers::{Bound, Conv1d, ParamStore};
use crate::numcore::{sigmoid, CustomOp, Mat, Tape, Var};

/// Lower clamp on the intersection length inside the logarithm of the boundary loss.
pub const INTERSECTION_EPS: f64 = 1e-6;
/// Candidates overlapping a kept interval at or above this IoU are suppressed.
pub const NMS_IOU: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub boundary: Vec<Conv1d>,
    pub confidence: Vec<Conv1d>,
    pub iou: Vec<Conv1d>,
}

#[derive(Debug, Clone)]
pub struct HeadOutputs {
    /// T×2 non-negative (start, end) offsets.
    pub offsets: Var,
    /// T×1 confidence logits.
    pub confidence_logits: Var,
    /// T×1 raw IoU estimates.
    pub iou: Var,
    /// Hidden pre-activations of every ReLU in the heads.
    pub pre_relu: Vec<Var>,
}

fn stack<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, widths: &[usize]) -> Vec<Conv1d> {
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| Conv1d::new(store, rng, &format!("{name}.conv{i}"), w[0], w[1]))
        .collect()
}

fn run_stack(layers: &[Conv1d], tape: &mut Tape, p: &Bound, x: Var, pre_relu: &mut Vec<Var>) -> Result<Var> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(tape, p, h)?;
        if i + 1 < layers.len() {
            pre_relu.push(h);
            h = tape.relu(h);
        }
    }
    Ok(h)
}

impl HeadParams {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, c_in: usize, hidden: usize) -> Self {
        Self {
            boundary: stack(store, rng, "heads.boundary", &[c_in, hidden, 2]),
            confidence: stack(store, rng, "heads.confidence", &[c_in, hidden, 1]),
            iou: stack(store, rng, "heads.iou", &[c_in, hidden, hidden, 1]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<HeadOutputs> {
        let mut pre_relu = Vec::new();
        let raw = run_stack(&self.boundary, tape, p, features, &mut pre_relu)?;
        let offsets = tape.softplus(raw);
        let confidence_logits = run_stack(&self.confidence, tape, p, features, &mut pre_relu)?;
        let iou = run_stack(&self.iou, tape, p, features, &mut pre_relu)?;
        Ok(HeadOutputs { offsets, confidence_logits, iou, pre_relu })
    }
}

/// `[t − d_s, t + d_e]` clamped to `[0, T − 1]`.
pub fn decode_box(t: usize, d_start: f64, d_end: f64, len: usize) -> Interval {
    let hi = (len - 1) as f64;
    let start = (t as f64 - d_start).clamp(0.0, hi);
    let end = (t as f64 + d_end).clamp(0.0, hi);
    Interval { start, end: end.max(start) }
}

/// Per-frame supervision derived from a ground-truth interval.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargets {
    pub len: usize,
    pub gt: (usize, usize),
    /// 1 inside the ground truth, 0 outside; doubles as the confidence label.
    pub positive: Vec<bool>,
    /// `(t − τs, τe − t)` for positive frames, zeros elsewhere.
    pub offsets: Vec<(f64, f64)>,
}

impl FrameTargets {
    pub fn new(len: usize, gt: (usize, usize)) -> Result<Self> {
        let (s, e) = gt;
        if len == 0 || s > e || e >= len {
            return Err(Error::Input(format!("ground truth {gt:?} invalid for {len} frames")));
        }
        let positive: Vec<bool> = (0..len).map(|t| s <= t && t <= e).collect();
        let offsets = (0..len)
            .map(|t| if positive[t] { ((t - s) as f64, (e - t) as f64) } else { (0.0, 0.0) })
            .collect();
        Ok(Self { len, gt, positive, offsets })
    }

    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    pub fn gt_interval(&self) -> Interval {
        Interval { start: self.gt.0 as f64, end: self.gt.1 as f64 }
    }

    /// IoU of every decoded predicted box with the ground truth.
    pub fn iou_labels(&self, offsets: &Mat) -> Vec<f64> {
        let gt = self.gt_interval();
        (0..self.len)
            .map(|t| interval_iou(decode_box(t, offsets[[t, 0]], offsets[[t, 1]], self.len), gt).unwrap_or(0.0))
            .collect()
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Backward of a loss whose input gradient is fixed at forward time.
struct FixedGrad {
    name: &'static str,
    grad: Mat,
}

impl CustomOp for FixedGrad {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, _inputs: &[&Mat], _output: &Mat, grad: &Mat) -> Vec<Mat> {
        vec![&self.grad * grad[[0, 0]]]
    }
}

fn check_rows(op: &'static str, m: &Mat, targets: &FrameTargets, cols: usize) -> Result<()> {
    if m.dim() != (targets.len, cols) {
        return Err(Error::dim(op, m.dim(), (targets.len, cols)));
    }
    Ok(())
}

/// Boundary loss value and its gradient with respect to the offsets.
pub fn boundary_loss_value(offsets: &Mat, targets: &FrameTargets) -> Result<(f64, Mat)> {
    check_rows("boundary_loss", offsets, targets, 2)?;
    let tp = targets.num_positive();
    if tp == 0 {
        return Err(Error::Input("boundary loss needs at least one positive frame".into()));
    }
    let (gs, ge) = (targets.gt.0 as f64, targets.gt.1 as f64);
    let hi = (targets.len - 1) as f64;
    let scale = 1.0 / tp as f64;
    let mut total = 0.0;
    let mut grad = Mat::zeros(offsets.dim());
    for t in 0..targets.len {
        if !targets.positive[t] {
            continue;
        }
        let (ds, de) = targets.offsets[t];
        let (ps, pe) = (offsets[[t, 0]], offsets[[t, 1]]);
        total += smooth_l1(ps - ds) + smooth_l1(pe - de);
        let mut g_ps = smooth_l1_grad(ps - ds);
        let mut g_pe = smooth_l1_grad(pe - de);

        let tf = t as f64;
        let raw_s = tf - ps;
        let raw_e = tf + pe;
        let s = raw_s.clamp(0.0, hi);
        let e = raw_e.clamp(0.0, hi);
        let ds_dps = if raw_s > 0.0 && raw_s < hi { -1.0 } else { 0.0 };
        let de_dpe = if raw_e > 0.0 && raw_e < hi { 1.0 } else { 0.0 };

        let inter_raw = e.min(ge) - s.max(gs);
        let inter = inter_raw.max(INTERSECTION_EPS);
        let union = (e.max(ge) - s.min(gs)).max(INTERSECTION_EPS);
        total += -inter.ln() + union.ln();

        // ∂(−ln inter + ln union) with respect to the decoded endpoints.
        let mut g_s = 0.0;
        let mut g_e = 0.0;
        if inter_raw > INTERSECTION_EPS {
            if s > gs {
                g_s += 1.0 / inter;
            }
            if e < ge {
                g_e -= 1.0 / inter;
            }
        }
        if s < gs {
            g_s -= 1.0 / union;
        }
        if e > ge {
            g_e += 1.0 / union;
        }
        g_ps += g_s * ds_dps;
        g_pe += g_e * de_dpe;
        grad[[t, 0]] = g_ps * scale;
        grad[[t, 1]] = g_pe * scale;
    }
    Ok((total * scale, grad))
}

/// Mean over positive frames of SmoothL1 on the offsets minus the log IoU of
/// the decoded boxes.
pub fn boundary_loss(tape: &mut Tape, offsets: Var, targets: &FrameTargets) -> Result<Var> {
    let (value, grad) = boundary_loss_value(tape.value(offsets), targets)?;
    Ok(tape.custom(&[offsets], Mat::from_elem((1, 1), value), Box::new(FixedGrad { name: "boundary_loss", grad })))
}

fn bce_with_logits(z: f64, c: f64) -> f64 {
    z.max(0.0) - z * c + (-z.abs()).exp().ln_1p()
}

pub fn confidence_loss_value(logits: &Mat, targets: &FrameTargets) -> Result<(f64, Mat)> {
    check_rows("confidence_loss", logits, targets, 1)?;
    let tp = targets.num_positive();
    if tp == 0 {
        return Err(Error::Input("confidence loss needs at least one positive frame".into()));
    }
    let scale = 1.0 / tp as f64;
    let mut total = 0.0;
    let mut grad = Mat::zeros(logits.dim());
    for t in 0..targets.len {
        let z = logits[[t, 0]];
        let c = if targets.positive[t] { 1.0 } else { 0.0 };
        total += bce_with_logits(z, c);
        grad[[t, 0]] = (sigmoid(z) - c) * scale;
    }
    Ok((total * scale, grad))
}

/// Binary cross-entropy summed over all frames, normalized by the positive count.
pub fn confidence_loss(tape: &mut Tape, logits: Var, targets: &FrameTargets) -> Result<Var> {
    let (value, grad) = confidence_loss_value(tape.value(logits), targets)?;
    Ok(tape.custom(&[logits], Mat::from_elem((1, 1), value), Box::new(FixedGrad { name: "confidence_loss", grad })))
}

pub fn iou_loss_value(iou: &Mat, offsets: &Mat, targets: &FrameTargets) -> Result<(f64, Mat)> {
    check_rows("iou_loss", offsets, targets, 2)?;
    iou_loss_against(iou, &targets.iou_labels(offsets))
}

/// IoU-head loss against precomputed labels.
pub fn iou_loss_against(iou: &Mat, labels: &[f64]) -> Result<(f64, Mat)> {
    if iou.dim() != (labels.len(), 1) {
        return Err(Error::dim("iou_loss", iou.dim(), (labels.len(), 1)));
    }
    let scale = 1.0 / labels.len() as f64;
    let mut total = 0.0;
    let mut grad = Mat::zeros(iou.dim());
    for (t, label) in labels.iter().enumerate() {
        let diff = iou[[t, 0]] - label;
        total += smooth_l1(diff);
        grad[[t, 0]] = smooth_l1_grad(diff) * scale;
    }
    Ok((total * scale, grad))
}

/// Mean SmoothL1 between predicted IoU and the IoU of each frame's decoded
/// box with the ground truth. The labels are constants: no gradient reaches
/// the offsets.
pub fn iou_loss(tape: &mut Tape, iou: Var, offsets: Var, targets: &FrameTargets) -> Result<Var> {
    let labels = targets.iou_labels(tape.value(offsets));
    iou_loss_with_labels(tape, iou, &labels)
}

pub fn iou_loss_with_labels(tape: &mut Tape, iou: Var, labels: &[f64]) -> Result<Var> {
    let (value, grad) = iou_loss_against(tape.value(iou), labels)?;
    Ok(tape.custom(&[iou], Mat::from_elem((1, 1), value), Box::new(FixedGrad { name: "iou_loss", grad })))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub boundary: f64,
    pub confidence: f64,
    pub iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { boundary: 1.0, confidence: 1.0, iou: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("boundary", self.boundary), ("confidence", self.confidence), ("iou", self.iou)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Losses {
    pub boundary: Var,
    pub confidence: Var,
    pub iou: Var,
    pub total: Var,
}

/// `λ1·L_b + λ2·L_c + λ3·L_i`
pub fn total_loss(tape: &mut Tape, heads: &HeadOutputs, targets: &FrameTargets, weights: &LossWeights) -> Result<Losses> {
    if tape.shape(heads.offsets) != (targets.len, 2) {
        return Err(Error::dim("total_loss", tape.shape(heads.offsets), (targets.len, 2)));
    }
    let labels = targets.iou_labels(tape.value(heads.offsets));
    total_loss_with_labels(tape, heads, targets, &labels, weights)
}

/// [`total_loss`] with the IoU-head labels held at given values.
pub fn total_loss_with_labels(
    tape: &mut Tape,
    heads: &HeadOutputs,
    targets: &FrameTargets,
    iou_labels: &[f64],
    weights: &LossWeights,
) -> Result<Losses> {
    weights.validate()?;
    let boundary = boundary_loss(tape, heads.offsets, targets)?;
    let confidence = confidence_loss(tape, heads.confidence_logits, targets)?;
    let iou = iou_loss_with_labels(tape, heads.iou, iou_labels)?;
    let a = tape.scale(boundary, weights.boundary);
    let b = tape.scale(confidence, weights.confidence);
    let c = tape.scale(iou, weights.iou);
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(Losses { boundary, confidence, iou, total })
}

/// Distance from the nearest point where the head losses are not
/// differentiable: ReLU hinges, SmoothL1 switch points, box clamps and
/// max/min switches in the log-IoU term. Finite-difference checks are only
/// meaningful when this is well above the step size.
pub fn kink_distance(tape: &Tape, heads: &HeadOutputs, targets: &FrameTargets, iou_labels: &[f64]) -> f64 {
    let mut dist = f64::INFINITY;
    for &h in &heads.pre_relu {
        dist = tape.value(h).iter().fold(dist, |d, x| d.min(x.abs()));
    }
    let off = tape.value(heads.offsets);
    let hi = (targets.len - 1) as f64;
    let (gs, ge) = (targets.gt.0 as f64, targets.gt.1 as f64);
    for t in (0..targets.len).filter(|&t| targets.positive[t]) {
        let (ds, de) = targets.offsets[t];
        let (ps, pe) = (off[[t, 0]], off[[t, 1]]);
        let raw_s = t as f64 - ps;
        let raw_e = t as f64 + pe;
        let s = raw_s.clamp(0.0, hi);
        let e = raw_e.clamp(0.0, hi);
        let (s_free, e_free) = (raw_s > 0.0 && raw_s < hi, raw_e > 0.0 && raw_e < hi);
        let mut near = vec![
            ((ps - ds).abs() - 1.0).abs(),
            ((pe - de).abs() - 1.0).abs(),
            raw_s.abs(),
            (raw_s - hi).abs(),
            raw_e.abs(),
            (raw_e - hi).abs(),
        ];
        // A clamped endpoint is locally constant, so its comparisons cannot switch.
        if s_free {
            near.push((s - gs).abs());
        }
        if e_free {
            near.push((e - ge).abs());
        }
        if s_free || e_free {
            near.push((e.min(ge) - s.max(gs) - INTERSECTION_EPS).abs());
        }
        dist = near.into_iter().fold(dist, f64::min);
    }
    let iou = tape.value(heads.iou);
    for (t, &label) in iou_labels.iter().enumerate() {
        dist = dist.min(((iou[[t, 0]] - label).abs() - 1.0).abs());
    }
    dist
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub interval: Interval,
    pub score: f64,
    /// Frame whose box this is.
    pub frame: usize,
}

/// Ranked predictions, scores non-increasing.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionSet(pub Vec<Prediction>);

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Prediction> {
        self.0.iter()
    }
}

/// Frame candidates scored by `sigmoid(confidence) · clamp(iou, 0, 1)`.
pub fn candidates(offsets: &Mat, logits: &Mat, iou: &Mat) -> Vec<Prediction> {
    let len = offsets.nrows();
    (0..len)
        .map(|t| Prediction {
            interval: decode_box(t, offsets[[t, 0]].max(0.0), offsets[[t, 1]].max(0.0), len),
            score: sigmoid(logits[[t, 0]]) * iou[[t, 0]].clamp(0.0, 1.0),
            frame: t,
        })
        .collect()
}

/// Greedy temporal NMS: highest score first (lower frame on ties); a
/// candidate is dropped when its IoU with any kept one reaches [`NMS_IOU`].
pub fn nms(mut cands: Vec<Prediction>, n: usize) -> PredictionSet {
    cands.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.frame.cmp(&b.frame)));
    let mut kept: Vec<Prediction> = Vec::new();
    for c in cands {
        if kept.len() == n {
            break;
        }
        if kept.iter().all(|k| interval_iou(k.interval, c.interval).unwrap_or(1.0) < NMS_IOU) {
            kept.push(c);
        }
    }
    PredictionSet(kept)
}

pub fn infer_top_n(offsets: &Mat, logits: &Mat, iou: &Mat, n: usize) -> Result<PredictionSet> {
    if n == 0 {
        return Err(Error::Input("top-n needs n ≥ 1".into()));
    }
    let len = offsets.nrows();
    if len == 0 || offsets.ncols() != 2 || logits.dim() != (len, 1) || iou.dim() != (len, 1) {
        return Err(Error::dim("infer_top_n", offsets.dim(), logits.dim()));
    }
    Ok(nms(candidates(offsets, logits, iou), n))
}

#[cfg(test)]
mod tests;
