use crate::error::{Error, Result};
use crate::model::NUM_REGIONS;
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const DEFAULT_SMOOTH_EPS: f64 = 1e-6;

fn check_target<T: Scalar>(g: &Graph<T>, logits: Var, target: &Tensor<T>, op: &'static str) -> Result<()> {
    if g.shape(logits) != target.shape() {
        return Err(Error::shape(op, format!("logits {:?} vs target {:?}", g.shape(logits), target.shape())));
    }
    if let Some(v) = target.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Data(format!("{op}: target value {} is not binary", v.as_f64())));
    }
    Ok(())
}

/// Soft Dice loss `1 − (2Σyp + ε)/(Σy + Σp + ε)` with `p = σ(logits)`,
/// summed over every element of the input.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
    check_target(g, logits, target, "dice_loss")?;
    let sum_y = target.data().iter().fold(T::zero(), |a, &v| a + v);
    let p = g.sigmoid(logits)?;
    let y = g.constant(target.clone())?;
    let yp = g.mul(p, y)?;
    let inter = g.sum_all(yp)?;
    let sum_p = g.sum_all(p)?;
    let num = g.scale(inter, T::lit(2.0))?;
    let num = g.add_scalar(num, T::lit(eps))?;
    let den = g.add_scalar(sum_p, sum_y + T::lit(eps))?;
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -T::one())?;
    g.add_scalar(neg, T::one())
}

/// Mean stable binary cross-entropy.
pub fn bce_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, target: &Tensor<T>) -> Result<Var> {
    check_target(g, logits, target, "bce_loss")?;
    g.bce_with_logits(logits, target)
}

/// Mean over the WT, TC and ET channels of `bce + dice`.
pub fn bce_dice_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
    match *g.shape(logits) {
        [_, c, _, _] if c == NUM_REGIONS => {}
        ref s => return Err(Error::shape("bce_dice_loss", format!("logits must be [N,{NUM_REGIONS},H,W], got {s:?}"))),
    }
    check_target(g, logits, target, "bce_dice_loss")?;
    let mut total: Option<Var> = None;
    for c in 0..NUM_REGIONS {
        let l = g.narrow(logits, 1, c, 1)?;
        let t = channel(target, c);
        let bce = g.bce_with_logits(l, &t)?;
        let dice = dice_loss(g, l, &t, eps)?;
        let lc = g.add(bce, dice)?;
        total = Some(match total {
            None => lc,
            Some(acc) => g.add(acc, lc)?,
        });
    }
    g.scale(total.expect("three channels"), T::lit(1.0 / NUM_REGIONS as f64))
}

/// Channel `c` of an `[N,C,H,W]` tensor as `[N,1,H,W]`.
pub fn channel<T: Scalar>(t: &Tensor<T>, c: usize) -> Tensor<T> {
    let s = t.shape();
    let (n, ch, plane) = (s[0], s[1], s[2] * s[3]);
    let mut data = Vec::with_capacity(n * plane);
    for i in 0..n {
        let base = (i * ch + c) * plane;
        data.extend_from_slice(&t.data()[base..base + plane]);
    }
    Tensor::new(vec![n, 1, s[2], s[3]], data).expect("channel slice")
}

/// Evaluates a loss builder on constant inputs.
pub fn loss_value<T: Scalar>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    f: impl FnOnce(&mut Graph<T>, Var, &Tensor<T>) -> Result<Var>,
) -> Result<T> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone())?;
    let l = f(&mut g, x, target)?;
    Ok(g.value(l).item())
}

/// Overlap counts of one binary prediction against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DiceCounts {
    pub intersection: usize,
    pub predicted: usize,
    pub truth: usize,
}

impl DiceCounts {
    pub fn from_masks(pred: &[u8], truth: &[u8]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::shape("dice_score", format!("prediction has {} pixels, truth {}", pred.len(), truth.len())));
        }
        let mut c = DiceCounts::default();
        for (&p, &t) in pred.iter().zip(truth) {
            if p > 1 || t > 1 {
                return Err(Error::Data(format!("dice_score: mask value {} is not binary", p.max(t))));
            }
            c.intersection += usize::from(p & t);
            c.predicted += usize::from(p);
            c.truth += usize::from(t);
        }
        Ok(c)
    }

    pub fn merge(self, o: DiceCounts) -> DiceCounts {
        DiceCounts {
            intersection: self.intersection + o.intersection,
            predicted: self.predicted + o.predicted,
            truth: self.truth + o.truth,
        }
    }

    /// `2|P∩G|/(|P|+|G|)`, or 1 when both are empty.
    pub fn score(&self) -> f64 {
        let den = self.predicted + self.truth;
        if den == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / den as f64
        }
    }
}

pub fn dice_score(pred: &[u8], truth: &[u8]) -> Result<f64> {
    Ok(DiceCounts::from_masks(pred, truth)?.score())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_score_cases() {
        assert_eq!(dice_score(&[1, 1, 0], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(dice_score(&[1, 1, 0, 0], &[0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(dice_score(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(dice_score(&[0, 0], &[0, 0]).unwrap(), 1.0);
        assert!(dice_score(&[2], &[1]).is_err());
        assert!(dice_score(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn bce_reference_values() {
        let t = Tensor::<f64>::zeros(vec![4]);
        let v = loss_value(&Tensor::zeros(vec![4]), &t, bce_loss).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        let v = loss_value(&Tensor::<f64>::full(vec![2], 40.0), &Tensor::ones(vec![2]), bce_loss).unwrap();
        assert!(v.is_finite() && v < 1e-17);
    }

    #[test]
    fn dice_loss_limits() {
        let ones = Tensor::<f64>::ones(vec![1, 1, 3, 3]);
        let v = loss_value(&Tensor::full(vec![1, 1, 3, 3], 40.0), &ones, |g, x, t| dice_loss(g, x, t, 1e-6)).unwrap();
        assert!(v.abs() < 1e-12);
        let zeros = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
        let v = loss_value(&Tensor::full(vec![1, 1, 3, 3], -40.0), &zeros, |g, x, t| dice_loss(g, x, t, 1e-6)).unwrap();
        assert!(v.abs() < 1e-9, "{v}");
        let half = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 0.0]).unwrap();
        assert!(loss_value(&zeros.reshape(vec![1, 1, 9, 1]).unwrap(), &half.reshape(vec![1, 1, 2, 1]).unwrap(), |g, x, t| dice_loss(g, x, t, 1e-6)).is_err());
    }

    #[test]
    fn combined_loss_needs_three_channels() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 2, 2]);
        assert!(loss_value(&x, &x, |g, v, t| bce_dice_loss(g, v, t, 1e-6)).is_err());
    }
}
