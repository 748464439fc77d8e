//! Training objectives for the teacher: the DETR-style box loss (L1 + GIoU),
//! the multi-point consistency term that ties predictions from two points
//! sampled in the same box, the symmetric flip/mask/jitter consistency term
//! for point-only images, and the combined step losses.
//!
//! Every loss is built on the tape, so gradients flow to whatever model
//! produced the predictions. Queries are point-derived and bound one-to-one
//! to their source boxes, so there is no bipartite matching anywhere.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Value};
use crate::data::{
    apply_mask, hflip_image, jitter_point, sample_point_pair, ImageSample, MaskConfig,
    ObjectAnnotation, PointAnnotation, PointSampling,
};
use crate::error::{Error, Result};
use crate::geometry::{hflip_point, BoxCCWH};
use crate::teacher::QueryBoxModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_m: f64,
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            lambda_m: 1.0,
            lambda_c: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_l1 < 0.0 || self.lambda_giou < 0.0 || self.lambda_m < 0.0 || self.lambda_c < 0.0
        {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Options for the symmetric consistency branch construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SymmetricCfg {
    pub mask: MaskConfig,
    /// Half-width of the uniform coordinate noise on the query point.
    pub jitter: f64,
    /// Apply the cutout to the flipped image (the equation-literal variant)
    /// instead of the original image.
    pub mask_on_flipped: bool,
    /// Treat the flipped-image branch as a fixed target.
    pub stop_grad_flipped: bool,
}

impl Default for SymmetricCfg {
    fn default() -> Self {
        Self {
            mask: MaskConfig::default(),
            jitter: crate::data::JITTER_AMPLITUDE,
            mask_on_flipped: false,
            stop_grad_flipped: false,
        }
    }
}

impl SymmetricCfg {
    /// Mask and jitter disabled; useful for identity checks.
    pub fn perturbation_free() -> Self {
        Self {
            mask: MaskConfig::disabled(),
            jitter: 0.0,
            ..Default::default()
        }
    }
}

/// Per-row sum of absolute differences of two `[M,4]` box matrices.
pub fn l1_rows(tape: &mut Tape, a: Value, b: Value) -> Value {
    let d = tape.sub(a, b);
    let d = tape.abs(d);
    tape.row_sum(d)
}

/// Per-row Euclidean norm of a difference of `[M,k]` matrices.
pub fn norm_rows(tape: &mut Tape, a: Value, b: Value) -> Value {
    let d = tape.sub(a, b);
    let sq = tape.mul(d, d);
    let s = tape.row_sum(sq);
    tape.sqrt_safe(s)
}

/// Per-row GIoU of two `[M,4]` ccwh box matrices, differentiable.
pub fn giou_rows(tape: &mut Tape, a: Value, b: Value) -> Value {
    let corners = |tape: &mut Tape, v: Value| {
        let c = tape.slice_cols(v, 0, 2); // cx, cy
        let e = tape.slice_cols(v, 2, 4); // w, h
        let half = tape.scale(e, 0.5);
        let lo = tape.sub(c, half);
        let hi = tape.add(c, half);
        (lo, hi, e)
    };
    let (alo, ahi, aext) = corners(tape, a);
    let (blo, bhi, bext) = corners(tape, b);

    let inner_lo = tape.max2(alo, blo);
    let inner_hi = tape.min2(ahi, bhi);
    let inner = tape.sub(inner_hi, inner_lo);
    let inner = tape.relu(inner);
    let ix = tape.slice_cols(inner, 0, 1);
    let iy = tape.slice_cols(inner, 1, 2);
    let inter = tape.mul(ix, iy);

    let area = |tape: &mut Tape, ext: Value| {
        let w = tape.slice_cols(ext, 0, 1);
        let h = tape.slice_cols(ext, 1, 2);
        tape.mul(w, h)
    };
    let area_a = area(tape, aext);
    let area_b = area(tape, bext);
    let sum = tape.add(area_a, area_b);
    let union = tape.sub(sum, inter);
    let iou = tape.div(inter, union);

    let outer_lo = tape.min2(alo, blo);
    let outer_hi = tape.max2(ahi, bhi);
    let outer = tape.sub(outer_hi, outer_lo);
    let hx = tape.slice_cols(outer, 0, 1);
    let hy = tape.slice_cols(outer, 1, 2);
    let hull = tape.mul(hx, hy);
    let gap = tape.sub(hull, union);
    let penalty = tape.div(gap, hull);
    tape.sub(iou, penalty)
}

fn boxes_to_array(boxes: &[BoxCCWH]) -> Array2<f64> {
    let mut a = Array2::zeros((boxes.len(), 4));
    for (i, b) in boxes.iter().enumerate() {
        a[[i, 0]] = b.cx;
        a[[i, 1]] = b.cy;
        a[[i, 2]] = b.w;
        a[[i, 3]] = b.h;
    }
    a
}

/// DETR-style box regression loss: mean over order-aligned pairs of
/// `λ_l1 * l1 + λ_giou * (1 - giou)`.
pub fn loss_box(tape: &mut Tape, pred: Value, gt: &[BoxCCWH], w: &LossWeights) -> Result<Value> {
    let rows = tape.value(pred).nrows();
    if rows != gt.len() {
        return Err(Error::Shape(format!(
            "{rows} predictions vs {} ground-truth boxes",
            gt.len()
        )));
    }
    let gt_v = tape.leaf(boxes_to_array(gt));
    let l1 = l1_rows(tape, pred, gt_v);
    let g = giou_rows(tape, pred, gt_v);
    let one_minus = tape.col_affine(g, &[-1.0], &[1.0]);
    let l1_term = tape.scale(l1, w.lambda_l1);
    let g_term = tape.scale(one_minus, w.lambda_giou);
    let per_pair = tape.add(l1_term, g_term);
    Ok(tape.mean_all(per_pair))
}

/// Multi-point consistency: mean Euclidean distance between box predictions
/// from two point sets sampled in the same boxes.
pub fn loss_multipoint(tape: &mut Tape, pred1: Value, pred2: Value) -> Result<Value> {
    let (r1, r2) = (tape.value(pred1).nrows(), tape.value(pred2).nrows());
    if r1 != r2 {
        return Err(Error::Shape(format!("{r1} vs {r2} predictions")));
    }
    let n = norm_rows(tape, pred1, pred2);
    Ok(tape.mean_all(n))
}

/// Combined fully-supervised objective for one image: a point pair is drawn
/// in every ground-truth box, the box loss applies to the first point set
/// and the consistency term ties the two. Returns `None` (after a debug
/// diagnostic) for images without objects.
///
/// The second forward is skipped when `λ_m == 0`; the pair is still drawn so
/// the RNG stream is identical across variants.
pub fn loss_step1<M: QueryBoxModel>(
    model: &M,
    tape: &mut Tape,
    img: &ImageSample,
    objects: &[ObjectAnnotation],
    sampling: PointSampling,
    rng: &mut impl Rng,
    w: &LossWeights,
) -> Result<Option<Value>> {
    if objects.is_empty() {
        log::debug!("image {} has no objects; skipped in step-1 loss", img.id);
        return Ok(None);
    }
    let mut pts1 = Vec::with_capacity(objects.len());
    let mut pts2 = Vec::with_capacity(objects.len());
    for o in objects {
        let (p1, p2) = sample_point_pair(&o.bbox, sampling, rng);
        pts1.push(PointAnnotation {
            point: p1,
            class_id: o.class_id,
            source_object: None,
        });
        pts2.push(PointAnnotation {
            point: p2,
            class_id: o.class_id,
            source_object: None,
        });
    }
    let gt: Vec<BoxCCWH> = objects.iter().map(|o| o.bbox).collect();
    let pred1 = model.forward_boxes(tape, img, &pts1)?;
    let base = loss_box(tape, pred1, &gt, w)?;
    if w.lambda_m == 0.0 {
        return Ok(Some(base));
    }
    let pred2 = model.forward_boxes(tape, img, &pts2)?;
    let lm = loss_multipoint(tape, pred1, pred2)?;
    let lm = tape.scale(lm, w.lambda_m);
    Ok(Some(tape.add(base, lm)))
}

/// Symmetric consistency for one weakly-annotated point: the flipped
/// prediction on the masked, point-jittered image must match the prediction
/// on the flipped image with the flipped point. Gradients flow through both
/// branches unless `stop_grad_flipped` is set.
///
/// RNG order is fixed (jitter, then mask) and is consumed even when
/// `λ_c == 0`, which short-circuits to a constant zero.
pub fn loss_symmetric<M: QueryBoxModel>(
    model: &M,
    tape: &mut Tape,
    point: &PointAnnotation,
    img: &ImageSample,
    sym: &SymmetricCfg,
    rng: &mut impl Rng,
    w: &LossWeights,
) -> Result<Value> {
    let jittered = if sym.jitter > 0.0 {
        jitter_point(point.point, sym.jitter, rng)
    } else {
        point.point
    };
    let base_a = if sym.mask_on_flipped {
        hflip_image(img)
    } else {
        img.clone()
    };
    let masked = apply_mask(&base_a, &sym.mask, jittered, rng);
    if w.lambda_c == 0.0 {
        return Ok(tape.leaf(Array2::zeros((1, 1))));
    }

    let query_a = PointAnnotation {
        point: jittered,
        class_id: point.class_id,
        source_object: None,
    };
    let pred_a = model.forward_boxes(tape, &masked, &[query_a])?;
    let flipped_a = tape.col_affine(pred_a, &[-1.0, 1.0, 1.0, 1.0], &[1.0, 0.0, 0.0, 0.0]);

    let flipped_img = hflip_image(img);
    let query_b = PointAnnotation {
        point: hflip_point(point.point),
        class_id: point.class_id,
        source_object: None,
    };
    let mut pred_b = model.forward_boxes(tape, &flipped_img, &[query_b])?;
    if sym.stop_grad_flipped {
        pred_b = tape.detach(pred_b);
    }

    let n = norm_rows(tape, flipped_a, pred_b);
    let m = tape.mean_all(n);
    Ok(tape.scale(m, w.lambda_c))
}

/// Step-2 objective over one labeled batch and one weak batch: the mean
/// step-1 loss over labeled images plus the mean symmetric consistency over
/// weak (image, point) items.
#[allow(clippy::too_many_arguments)]
pub fn loss_step2_batch<M: QueryBoxModel>(
    model: &M,
    tape: &mut Tape,
    labeled: &[(&ImageSample, &[ObjectAnnotation])],
    weak: &[(&ImageSample, &PointAnnotation)],
    sampling: PointSampling,
    sym: &SymmetricCfg,
    rng: &mut impl Rng,
    w: &LossWeights,
) -> Result<Value> {
    if labeled.is_empty() && weak.is_empty() {
        return Err(Error::Empty("step-2 batch has no images".into()));
    }
    let mut terms: Vec<Value> = Vec::new();
    let mut labeled_terms = Vec::new();
    for (img, objects) in labeled {
        if let Some(l) = loss_step1(model, tape, img, objects, sampling, rng, w)? {
            labeled_terms.push(l);
        }
    }
    if !labeled_terms.is_empty() {
        let n = labeled_terms.len() as f64;
        let mut acc = labeled_terms[0];
        for t in &labeled_terms[1..] {
            acc = tape.add(acc, *t);
        }
        terms.push(tape.scale(acc, 1.0 / n));
    }
    let mut weak_terms = Vec::new();
    for (img, point) in weak {
        weak_terms.push(loss_symmetric(model, tape, point, img, sym, rng, w)?);
    }
    if !weak_terms.is_empty() {
        let n = weak_terms.len() as f64;
        let mut acc = weak_terms[0];
        for t in &weak_terms[1..] {
            acc = tape.add(acc, *t);
        }
        terms.push(tape.scale(acc, 1.0 / n));
    }
    match terms.len() {
        0 => Ok(tape.leaf(Array2::zeros((1, 1)))),
        1 => Ok(terms[0]),
        _ => Ok(tape.add(terms[0], terms[1])),
    }
}
