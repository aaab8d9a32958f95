//! Correspondence and pose accuracy measures, and the training-style loss
//! functionals evaluated on fixed warps.

use crate::error::{invalid, Error, Result};
use crate::geometry::{check_rotation, WarpField};
use crate::scalar::{norm2, sub2, Scalar};

/// Per-point end-point errors with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSample<T> {
    pub errors: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> ErrorSample<T> {
    /// All samples valid.
    pub fn new(errors: Vec<T>) -> Result<Self> {
        let valid = vec![true; errors.len()];
        Self::with_mask(errors, valid)
    }

    pub fn with_mask(errors: Vec<T>, valid: Vec<bool>) -> Result<Self> {
        if errors.len() != valid.len() {
            return Err(invalid("error and mask lengths differ"));
        }
        if errors.iter().zip(&valid).any(|(e, &v)| v && !(*e >= T::zero())) {
            return Err(invalid("errors must be non-negative"));
        }
        Ok(Self { errors, valid })
    }

    /// Valid errors only.
    pub fn valid_errors(&self) -> Vec<T> {
        self.errors.iter().zip(&self.valid).filter(|(_, &v)| v).map(|(&e, _)| e).collect()
    }
}

/// Precision against ascending thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionCurve<T> {
    pub thresholds: Vec<T>,
    pub precision: Vec<T>,
}

/// Fraction of `errors` strictly below `t`.
pub fn precision_at<T: Scalar>(errors: &[T], t: T) -> T {
    let n = errors.iter().filter(|&&e| e < t).count();
    T::from_usize_lossy(n) / T::from_usize_lossy(errors.len())
}

pub fn precision_curve<T: Scalar>(errors: &ErrorSample<T>, thresholds: &[T]) -> Result<PrecisionCurve<T>> {
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(invalid("thresholds must be strictly increasing"));
    }
    let e = errors.valid_errors();
    if e.is_empty() {
        return Err(Error::UndefinedResult("no valid samples".into()));
    }
    Ok(PrecisionCurve {
        thresholds: thresholds.to_vec(),
        precision: thresholds.iter().map(|&t| precision_at(&e, t)).collect(),
    })
}

fn check_pair<T: Scalar>(pred: &WarpField<T>, reference: &WarpField<T>, mask: &[bool]) -> Result<()> {
    if pred.height() != reference.height() || pred.width() != reference.width() {
        return Err(invalid(format!(
            "warp shapes differ: {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            reference.height(),
            reference.width()
        )));
    }
    if mask.len() != pred.len() {
        return Err(invalid(format!("mask has {} entries, warp {}", mask.len(), pred.len())));
    }
    Ok(())
}

/// End-point errors in support-image pixels. `support_dims` is `(height, width)`.
pub fn endpoint_errors<T: Scalar>(pred: &WarpField<T>, reference: &WarpField<T>, mask: &[bool], support_dims: (usize, usize)) -> Result<ErrorSample<T>> {
    check_pair(pred, reference, mask)?;
    let sx = T::from_usize_lossy(support_dims.1) / T::lit(2.0);
    let sy = T::from_usize_lossy(support_dims.0) / T::lit(2.0);
    let errors = pred
        .flow
        .iter()
        .zip(&reference.flow)
        .map(|(a, b)| {
            let d = sub2(*a, *b);
            norm2([d[0] * sx, d[1] * sy])
        })
        .collect();
    ErrorSample::with_mask(errors, mask.to_vec())
}

/// Masked fraction of pixels whose end-point error is below `tau` pixels.
pub fn pck<T: Scalar>(pred: &WarpField<T>, reference: &WarpField<T>, mask: &[bool], tau: T, support_dims: (usize, usize)) -> Result<T> {
    if !(tau > T::zero()) {
        return Err(invalid("pck threshold must be positive"));
    }
    let e = endpoint_errors(pred, reference, mask, support_dims)?.valid_errors();
    if e.is_empty() {
        return Err(Error::UndefinedResult("empty mask".into()));
    }
    Ok(precision_at(&e, tau))
}

/// Masked mean end-point error in pixels.
pub fn aepe<T: Scalar>(pred: &WarpField<T>, reference: &WarpField<T>, mask: &[bool], support_dims: (usize, usize)) -> Result<T> {
    let e = endpoint_errors(pred, reference, mask, support_dims)?.valid_errors();
    if e.is_empty() {
        return Err(Error::UndefinedResult("empty mask".into()));
    }
    Ok(e.iter().copied().sum::<T>() / T::from_usize_lossy(e.len()))
}

/// Area under the precision curve on `[0, alpha]`, divided by `alpha`.
///
/// Precision is a right-continuous step function of the threshold, so the
/// trapezoid nodes are doubled at every jump; the result is the exact
/// integral.
pub fn auc<T: Scalar>(errors: &ErrorSample<T>, alpha: T) -> Result<T> {
    if !(alpha > T::zero()) {
        return Err(invalid("alpha must be positive"));
    }
    let mut e = errors.valid_errors();
    if e.is_empty() {
        return Err(Error::UndefinedResult("empty error set".into()));
    }
    e.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let n = T::from_usize_lossy(e.len());
    // nodes (t, precision) with jumps at each unique error
    let mut nodes: Vec<(T, T)> = vec![(T::zero(), T::zero())];
    let mut below = 0usize;
    let mut i = 0;
    while i < e.len() && e[i] <= alpha {
        let t = e[i];
        let before = T::from_usize_lossy(below) / n;
        while i < e.len() && e[i] == t {
            i += 1;
        }
        below = i;
        nodes.push((t, before));
        nodes.push((t, T::from_usize_lossy(below) / n));
    }
    nodes.push((alpha, T::from_usize_lossy(below) / n));
    // at t = 0 precision is 0 unless errors are exactly 0; the doubled node handles that
    let mut area = T::zero();
    for w in nodes.windows(2) {
        area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / T::lit(2.0);
    }
    Ok(area / alpha)
}

/// Mean precision over the thresholds `{5, 10, 20}` not exceeding `alpha`.
pub fn map_at<T: Scalar>(errors: &ErrorSample<T>, alpha: T) -> Result<T> {
    let a = alpha.as_f64();
    if ![5.0, 10.0, 20.0].contains(&a) {
        return Err(invalid(format!("mAP threshold must be 5, 10 or 20, got {a}")));
    }
    let e = errors.valid_errors();
    if e.is_empty() {
        return Err(Error::UndefinedResult("empty error set".into()));
    }
    let ts: Vec<f64> = [5.0, 10.0, 20.0].into_iter().filter(|&t| t <= a).collect();
    let sum: T = ts.iter().map(|&t| precision_at(&e, T::lit(t))).sum();
    Ok(sum / T::from_usize_lossy(ts.len()))
}

/// Geodesic angle between two rotations, in radians.
///
/// Evaluated as `atan2(sin, cos)` of the relative rotation, which equals the
/// arccos of the clamped trace formula but keeps full precision near 0 and π.
pub fn rotation_error<T: Scalar>(r: &[[T; 3]; 3], r_hat: &[[T; 3]; 3]) -> Result<T> {
    let tol = T::lit(1e-6);
    check_rotation(r, tol)?;
    check_rotation(r_hat, tol)?;
    // rel = rᵀ · r_hat
    let mut rel = [[T::zero(); 3]; 3];
    for (i, row) in rel.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            for k in 0..3 {
                *v += r[k][i] * r_hat[k][j];
            }
        }
    }
    let half = T::lit(0.5);
    let c = ((rel[0][0] + rel[1][1] + rel[2][2] - T::one()) * half).max(-T::one()).min(T::one());
    let sk = [rel[2][1] - rel[1][2], rel[0][2] - rel[2][0], rel[1][0] - rel[0][1]];
    let s = (sk[0] * sk[0] + sk[1] * sk[1] + sk[2] * sk[2]).sqrt() * half;
    Ok(s.atan2(c))
}

/// Angle between translation directions, ignoring sign.
pub fn translation_error<T: Scalar>(t: &[T; 3], t_hat: &[T; 3]) -> Result<T> {
    let n = |v: &[T; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let (a, b) = (n(t), n(t_hat));
    if !(a > T::zero()) || !(b > T::zero()) {
        return Err(invalid("translation must be nonzero"));
    }
    let c = (t[0] * t_hat[0] + t[1] * t_hat[1] + t[2] * t_hat[2]) / (a * b);
    Ok(c.abs().min(T::one()).acos())
}

pub fn pose_error<T: Scalar>(r: &[[T; 3]; 3], t: &[T; 3], r_hat: &[[T; 3]; 3], t_hat: &[T; 3]) -> Result<T> {
    Ok(rotation_error(r, r_hat)?.max(translation_error(t, t_hat)?))
}

/// Mean over all pixels of `p · ‖pred − ref‖` in normalized units.
pub fn warp_loss<T: Scalar>(pred: &WarpField<T>, reference: &WarpField<T>, p: &[T]) -> Result<T> {
    if pred.height() != reference.height() || pred.width() != reference.width() || p.len() != pred.len() {
        return Err(invalid("warp and mask shapes differ"));
    }
    let s: T = pred
        .flow
        .iter()
        .zip(&reference.flow)
        .zip(p)
        .map(|((a, b), &w)| if w == T::zero() { T::zero() } else { w * norm2(sub2(*a, *b)) })
        .sum();
    Ok(s / T::from_usize_lossy(pred.len().max(1)))
}

/// Mean binary cross-entropy of `p_hat` against targets `p`.
pub fn conf_loss<T: Scalar>(p_hat: &[T], p: &[T]) -> Result<T> {
    if p_hat.len() != p.len() {
        return Err(invalid("confidence and target lengths differ"));
    }
    let lo = T::lit(1e-7);
    let hi = T::one() - lo;
    let s: T = p_hat
        .iter()
        .zip(p)
        .map(|(&q, &y)| {
            let q = q.max(lo).min(hi);
            -(y * q.ln() + (T::one() - y) * (T::one() - q).ln())
        })
        .sum();
    Ok(s / T::from_usize_lossy(p.len().max(1)))
}

pub const CONF_LOSS_WEIGHT: f64 = 0.01;

/// Inputs for one scale of [`total_loss`].
#[derive(Debug, Clone, Copy)]
pub struct ScaleTerms<'a, T> {
    pub pred: &'a WarpField<T>,
    pub reference: &'a WarpField<T>,
    pub confidence: &'a [T],
    pub mask: &'a [T],
}

/// Sum over scales (coarse first) of `warp_loss + 0.01 · conf_loss`.
/// On every finer scale the mask is zeroed where the next-coarser warp is
/// more than `coarse_gate` of its own cells away from the reference.
pub fn total_loss<T: Scalar>(scales: &[ScaleTerms<'_, T>], coarse_gate: T) -> Result<T> {
    let lambda = T::lit(CONF_LOSS_WEIGHT);
    let mut total = T::zero();
    for (k, s) in scales.iter().enumerate() {
        let mut p = s.mask.to_vec();
        if p.len() != s.pred.len() {
            return Err(invalid("mask and warp lengths differ"));
        }
        if k > 0 {
            let c = &scales[k - 1];
            let (cw, ch) = (T::from_usize_lossy(c.pred.width()), T::from_usize_lossy(c.pred.height()));
            let half = T::lit(0.5);
            for (i, x) in s.pred.grid().coords().iter().enumerate() {
                let (a, _) = c.pred.sample(*x);
                let (b, _) = c.reference.sample(*x);
                let d = sub2(a, b);
                if norm2([d[0] * cw * half, d[1] * ch * half]) > coarse_gate {
                    p[i] = T::zero();
                }
            }
        }
        total += warp_loss(s.pred, s.reference, &p)? + lambda * conf_loss(s.confidence, &p)?;
    }
    Ok(total)
}
