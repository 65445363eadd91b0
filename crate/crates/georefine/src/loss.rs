//! Training objective: depth reconstruction + gradient matching, normal
//! orientation + raw alignment, and their weighted total.
//!
//! Each loss exists twice: a tape builder used during training (`*_on`) and
//! a plain evaluation twin over tensors. Tests pin the two to each other.

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::normals::{pseudo_normals, PseudoNormalField, NORMAL_WINDOW};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the depth-gradient matching term inside the depth loss.
    pub grad: f64,
    /// Weight of the raw-normal MSE term inside the normal loss.
    pub mse: f64,
    pub depth: f64,
    pub normal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { grad: 0.5, mse: 1.0, depth: 1.0, normal: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("grad", self.grad),
            ("mse", self.mse),
            ("depth", self.depth),
            ("normal", self.normal),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn mask_count(mask: Option<&Tensor>, total: usize) -> usize {
    match mask {
        None => total,
        Some(m) => m.data().iter().filter(|&&v| v != 0.0).count(),
    }
}

/// 0/1 mask for forward differences: both endpoints must be valid.
fn grad_mask(mask: &Tensor, horizontal: bool) -> Tensor {
    let (h, w) = (mask.rows(), mask.cols());
    if horizontal {
        Tensor::from_fn(&[h, w - 1], |i| {
            let (r, c) = (i / (w - 1), i % (w - 1));
            mask.get2(r, c) * mask.get2(r, c + 1)
        })
    } else {
        Tensor::from_fn(&[h - 1, w], |i| {
            let (r, c) = (i / w, i % w);
            mask.get2(r, c) * mask.get2(r + 1, c)
        })
    }
}

/// Masked mean-square helper on the tape: mean of (a-b)^2 over mask!=0.
fn masked_mse_on(tape: &mut Tape, a: Var, b: Var, mask: Option<&Tensor>, count: usize) -> Var {
    let diff = tape.sub(a, b);
    let diff = match mask {
        Some(m) => {
            let mv = tape.constant(m.clone());
            tape.mul(diff, mv)
        }
        None => diff,
    };
    let sq = tape.mul(diff, diff);
    let total = tape.sum_all(sq);
    tape.scale(total, 1.0 / count as f64)
}

/// Depth objective on the tape: MSE over valid pixels plus `lambda_grad`
/// times the mean squared difference of horizontal and vertical forward
/// differences (both endpoints valid). Returns (total, mse, grad-term).
pub fn depth_loss_on(
    tape: &mut Tape,
    d_refined: Var,
    d_gt: &Tensor,
    mask: Option<&Tensor>,
    lambda_grad: f64,
) -> Result<(Var, Var, Var)> {
    let shape = tape.value(d_refined).shape().to_vec();
    if d_gt.shape() != shape.as_slice() {
        return Err(Error::Shape {
            op: "depth_loss",
            lhs: shape,
            rhs: d_gt.shape().to_vec(),
        });
    }
    if let Some(m) = mask {
        if m.shape() != d_gt.shape() {
            return Err(Error::Shape {
                op: "depth_loss mask",
                lhs: m.shape().to_vec(),
                rhs: d_gt.shape().to_vec(),
            });
        }
    }
    let (h, w) = (d_gt.rows(), d_gt.cols());
    let valid = mask_count(mask, h * w);
    if valid == 0 {
        return Err(Error::EmptyMask("depth_loss"));
    }
    let gt = tape.constant(d_gt.clone());
    let mse = masked_mse_on(tape, d_refined, gt, mask, valid);

    let (mx, my) = match mask {
        Some(m) => (Some(grad_mask(m, true)), Some(grad_mask(m, false))),
        None => (None, None),
    };
    let (cx, cy) = (
        mx.as_ref().map_or(h * (w - 1), |m| mask_count(Some(m), 0)),
        my.as_ref().map_or((h - 1) * w, |m| mask_count(Some(m), 0)),
    );
    let grad_term = if cx + cy == 0 {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let gx_p = tape.grad_x(d_refined);
        let gy_p = tape.grad_y(d_refined);
        let gt_t = tape.constant(d_gt.clone());
        let gx_t = tape.grad_x(gt_t);
        let gy_t = tape.grad_y(gt_t);
        let dx = tape.sub(gx_p, gx_t);
        let dy = tape.sub(gy_p, gy_t);
        let dx = match &mx {
            Some(m) => {
                let mv = tape.constant(m.clone());
                tape.mul(dx, mv)
            }
            None => dx,
        };
        let dy = match &my {
            Some(m) => {
                let mv = tape.constant(m.clone());
                tape.mul(dy, mv)
            }
            None => dy,
        };
        let sx = tape.mul(dx, dx);
        let sy = tape.mul(dy, dy);
        let tx = tape.sum_all(sx);
        let ty = tape.sum_all(sy);
        let sum = tape.add(tx, ty);
        tape.scale(sum, 1.0 / (cx + cy) as f64)
    };
    let scaled = tape.scale(grad_term, lambda_grad);
    let total = tape.add(mse, scaled);
    Ok((total, mse, grad_term))
}

/// Plain-tensor twin of `depth_loss_on`.
pub fn depth_loss(
    d_refined: &Tensor,
    d_gt: &Tensor,
    mask: Option<&Tensor>,
    lambda_grad: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let dr = tape.constant(d_refined.clone());
    let (total, _, _) = depth_loss_on(&mut tape, dr, d_gt, mask, lambda_grad)?;
    Ok(tape.value_scalar(total))
}

/// Tile an [H, W] 0/1 mask across 3 channels as a [3, H*W] tensor.
fn mask3_flat(mask: &Tensor) -> Tensor {
    let n = mask.len();
    Tensor::from_fn(&[3, n], |i| mask.data()[i % n])
}

/// Normal objective on the tape. `n_refined_raw` is the un-normalized
/// refined field [3, H, W]; the angular term renormalizes it (gradient
/// included), the MSE term compares it raw against the pseudo normals.
/// Per-pixel MSE sums squared error over the three channels. Returns
/// (total, angular, mse).
pub fn normal_loss_on(
    tape: &mut Tape,
    n_refined_raw: Var,
    pseudo: &PseudoNormalField,
    lambda_mse: f64,
) -> Result<(Var, Var, Var)> {
    let shape = tape.value(n_refined_raw).shape().to_vec();
    if pseudo.normals.shape() != shape.as_slice() {
        return Err(Error::Shape {
            op: "normal_loss",
            lhs: shape,
            rhs: pseudo.normals.shape().to_vec(),
        });
    }
    let valid = pseudo.valid_count();
    if valid == 0 {
        return Err(Error::EmptyMask("normal_loss"));
    }
    let n = shape[1] * shape[2];
    let mask_flat = mask3_flat(&pseudo.mask_tensor());
    let pseudo_flat = pseudo.normals.reshaped(&[3, n])?;

    let raw_flat = tape.reshape(n_refined_raw, &[3, n]);
    let fallback = tape.constant(pseudo_flat.clone());
    let unit = tape.unit3_or(raw_flat, fallback);
    let target = tape.constant(pseudo_flat.clone());
    let dots = tape.mul(unit, target);
    let maskv = tape.constant(mask_flat.clone());
    let dots = tape.mul(dots, maskv);
    let dot_sum = tape.sum_all(dots);
    let v_const = tape.constant(Tensor::scalar(valid as f64));
    let angular_sum = tape.sub(v_const, dot_sum);
    let angular = tape.scale(angular_sum, 1.0 / valid as f64);

    let target2 = tape.constant(pseudo_flat);
    let diff = tape.sub(raw_flat, target2);
    let maskv2 = tape.constant(mask_flat);
    let diff = tape.mul(diff, maskv2);
    let sq = tape.mul(diff, diff);
    let mse_sum = tape.sum_all(sq);
    let mse = tape.scale(mse_sum, 1.0 / valid as f64);

    let scaled = tape.scale(mse, lambda_mse);
    let total = tape.add(angular, scaled);
    Ok((total, angular, mse))
}

/// Plain-tensor twin of `normal_loss_on`.
pub fn normal_loss(
    n_refined_raw: &Tensor,
    pseudo: &PseudoNormalField,
    lambda_mse: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let nr = tape.constant(n_refined_raw.clone());
    let (total, _, _) = normal_loss_on(&mut tape, nr, pseudo, lambda_mse)?;
    Ok(tape.value_scalar(total))
}

/// The named pieces of one training objective evaluation.
pub struct LossTerms {
    pub total: Var,
    pub depth_mse: Var,
    pub depth_grad: Var,
    pub normal_angle: Var,
    pub normal_mse: Var,
}

/// Weighted total objective on the tape. The pseudo-normal field must come
/// from ground-truth depth (it enters as a constant), and the depth mask,
/// when given, marks valid ground-truth pixels.
pub fn total_loss_on(
    tape: &mut Tape,
    d_refined: Var,
    n_refined_raw: Var,
    d_gt: &Tensor,
    pseudo: &PseudoNormalField,
    depth_mask: Option<&Tensor>,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let (d_total, depth_mse, depth_grad) =
        depth_loss_on(tape, d_refined, d_gt, depth_mask, weights.grad)?;
    let (n_total, normal_angle, normal_mse) =
        normal_loss_on(tape, n_refined_raw, pseudo, weights.mse)?;
    let d_scaled = tape.scale(d_total, weights.depth);
    let n_scaled = tape.scale(n_total, weights.normal);
    let total = tape.add(d_scaled, n_scaled);
    Ok(LossTerms { total, depth_mse, depth_grad, normal_angle, normal_mse })
}

/// Whole-map objective over tensors: derives pseudo-normals from the
/// ground-truth depth, then evaluates the weighted total.
pub fn total_loss(
    d_refined: &Tensor,
    n_refined_raw: &Tensor,
    d_gt: &Tensor,
    camera: &CameraModel,
    weights: &LossWeights,
) -> Result<f64> {
    let pseudo = pseudo_normals(d_gt, camera, NORMAL_WINDOW)?;
    let mut tape = Tape::new();
    let dr = tape.constant(d_refined.clone());
    let nr = tape.constant(n_refined_raw.clone());
    let terms = total_loss_on(&mut tape, dr, nr, d_gt, &pseudo, None, weights)?;
    Ok(tape.value_scalar(terms.total))
}
