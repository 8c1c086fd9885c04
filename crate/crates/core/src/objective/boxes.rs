//! Box geometry: conversions, IoU and generalized IoU.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub fn cxcywh_to_xyxy(b: [f64; 4]) -> [f64; 4] {
    [
        b[0] - 0.5 * b[2],
        b[1] - 0.5 * b[3],
        b[0] + 0.5 * b[2],
        b[1] + 0.5 * b[3],
    ]
}

pub fn xyxy_to_cxcywh(b: [f64; 4]) -> [f64; 4] {
    [
        0.5 * (b[0] + b[2]),
        0.5 * (b[1] + b[3]),
        b[2] - b[0],
        b[3] - b[1],
    ]
}

fn check_corner(b: &[f64; 4]) -> Result<()> {
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("box coordinates".into()));
    }
    if b[2] < b[0] || b[3] < b[1] {
        return Err(Error::InvalidArgument(format!(
            "box with negative extent {b:?}"
        )));
    }
    Ok(())
}

/// IoU of two corner-form boxes; 0 when both are empty.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    check_corner(&a)?;
    check_corner(&b)?;
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

/// Generalized IoU of two corner-form boxes, in `[-1, 1]`.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    let i = iou(a, b)?;
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - iw * ih;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    if hull <= 0.0 {
        return Ok(i);
    }
    Ok(i - (hull - union) / hull)
}

pub fn giou_loss(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    Ok(1.0 - giou(a, b)?)
}

/// Differentiable GIoU between predicted center-form boxes `pred[P, 4]`
/// and fixed center-form targets `[P, 4]`, giving `[P]`.
pub fn giou_tape(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let p = tape.shape(pred)[0];
    if tape.shape(pred) != [p, 4] || target.shape() != [p, 4] {
        return shape_err(format!(
            "giou of {:?} against {:?}",
            tape.shape(pred),
            target.shape()
        ));
    }
    let corners = |tape: &mut Tape, b: Var| -> Result<(Var, Var, Var, Var, Var)> {
        let c = tape.narrow(b, 1, 0, 2)?;
        let s = tape.narrow(b, 1, 2, 2)?;
        let hs = tape.scale(s, 0.5)?;
        let lo = tape.sub(c, hs)?;
        let hi = tape.add(c, hs)?;
        let sw = tape.narrow(s, 1, 0, 1)?;
        let sh = tape.narrow(s, 1, 1, 1)?;
        let area = tape.mul(sw, sh)?;
        let x0 = tape.narrow(lo, 1, 0, 1)?;
        let y0 = tape.narrow(lo, 1, 1, 1)?;
        let x1 = tape.narrow(hi, 1, 0, 1)?;
        let y1 = tape.narrow(hi, 1, 1, 1)?;
        let lo = tape.concat(&[x0, y0], 1)?;
        let hi = tape.concat(&[x1, y1], 1)?;
        Ok((lo, hi, area, x0, y0))
    };
    let t = tape.constant(target.clone());
    let (plo, phi, parea, _, _) = corners(tape, pred)?;
    let (tlo, thi, tarea, _, _) = corners(tape, t)?;
    let ilo = tape.maximum(plo, tlo)?;
    let ihi = tape.minimum(phi, thi)?;
    let iext = tape.sub(ihi, ilo)?;
    let zero = tape.constant(Tensor::zeros([1]));
    let iext = tape.maximum(iext, zero)?;
    let iw = tape.narrow(iext, 1, 0, 1)?;
    let ih = tape.narrow(iext, 1, 1, 1)?;
    let inter = tape.mul(iw, ih)?;
    let union = tape.add(parea, tarea)?;
    let union = tape.sub(union, inter)?;
    let union_safe = tape.add_scalar(union, 1e-12)?;
    let iou = tape.div(inter, union_safe)?;
    let hlo = tape.minimum(plo, tlo)?;
    let hhi = tape.maximum(phi, thi)?;
    let hext = tape.sub(hhi, hlo)?;
    let hw = tape.narrow(hext, 1, 0, 1)?;
    let hh = tape.narrow(hext, 1, 1, 1)?;
    let hull = tape.mul(hw, hh)?;
    let hull_safe = tape.add_scalar(hull, 1e-12)?;
    let gap = tape.sub(hull, union)?;
    let pen = tape.div(gap, hull_safe)?;
    let g = tape.sub(iou, pen)?;
    tape.reshape(g, &[p])
}
