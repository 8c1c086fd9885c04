use crate::error::{shape_err, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

fn check_binary(targets: &Tensor) -> Result<()> {
    if targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::InvalidArgument(
            "focal targets must be 0 or 1".into(),
        ));
    }
    Ok(())
}

/// Element-wise sigmoid focal loss, summed. `alpha = None` weights both
/// classes equally.
pub fn focal_loss_sum(
    tape: &mut Tape,
    logits: Var,
    targets: &Tensor,
    alpha: Option<f64>,
    gamma: f64,
) -> Result<Var> {
    check_binary(targets)?;
    let per = tape.sigmoid_focal(logits, targets.clone(), alpha, gamma)?;
    tape.sum(per)
}

/// Mean-reduced sigmoid focal loss.
pub fn focal_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &Tensor,
    alpha: Option<f64>,
    gamma: f64,
) -> Result<Var> {
    check_binary(targets)?;
    let per = tape.sigmoid_focal(logits, targets.clone(), alpha, gamma)?;
    tape.mean(per)
}

/// Focal loss of one probability, by the textbook formula.
pub fn focal_value(p: f64, y: f64, alpha: Option<f64>, gamma: f64) -> f64 {
    let (pt, at) = if y > 0.5 {
        (p, alpha.unwrap_or(1.0))
    } else {
        (1.0 - p, alpha.map_or(1.0, |a| 1.0 - a))
    };
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

/// `1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1)` per row of
/// `logits[P, N]`, giving `[P]`.
pub fn dice_rows(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    if tape.shape(logits) != targets.shape() || targets.rank() != 2 {
        return shape_err(format!(
            "dice logits {:?} vs targets {:?}",
            tape.shape(logits),
            targets.shape()
        ));
    }
    let p = tape.sigmoid(logits)?;
    let t = tape.constant(targets.clone());
    let pt = tape.mul(p, t)?;
    let inter = tape.sum_axis(pt, -1)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, 1.0)?;
    let ps = tape.sum_axis(p, -1)?;
    let tsum = Tensor::new(
        [targets.shape()[0]],
        targets
            .data()
            .chunks_exact(targets.shape()[1])
            .map(|r| r.iter().sum::<f64>() + 1.0)
            .collect(),
    )?;
    let ts = tape.constant(tsum);
    let den = tape.add(ps, ts)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.neg(ratio)?;
    tape.add_scalar(neg, 1.0)
}

/// Dice loss of one mask (any shape), in `[0, 1]`.
pub fn dice_loss(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    if tape.shape(logits) != target.shape() {
        return shape_err(format!(
            "dice logits {:?} vs target {:?}",
            tape.shape(logits),
            target.shape()
        ));
    }
    let n = target.len();
    let l = tape.reshape(logits, &[1, n])?;
    let t = target.clone().reshape([1, n])?;
    let d = dice_rows(tape, l, &t)?;
    tape.reshape(d, &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_difference_check, FdOptions};
    use crate::numerics::Rng;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn focal_examples() {
        let p: f64 = 0.9;
        let z = (p / (1.0 - p)).ln();
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([1], vec![z]).unwrap());
        let l = focal_loss(
            &mut t,
            x,
            &Tensor::new([1], vec![1.0]).unwrap(),
            Some(0.25),
            2.0,
        )
        .unwrap();
        let want = -0.25 * 0.1f64.powi(2) * 0.9f64.ln();
        assert!((scalar(&t, l) - want).abs() < 1e-15);
        assert!((want - 2.634e-4).abs() < 1e-7);
        let x = t.constant(Tensor::new([1], vec![30.0]).unwrap());
        let l = focal_loss(
            &mut t,
            x,
            &Tensor::new([1], vec![1.0]).unwrap(),
            Some(0.25),
            2.0,
        )
        .unwrap();
        assert!(scalar(&t, l) < 1e-20);
        assert!(focal_loss(&mut t, x, &Tensor::new([1], vec![0.5]).unwrap(), None, 2.0).is_err());
    }

    #[test]
    fn focal_without_focusing_is_cross_entropy() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let z = rng.range(-8.0, 8.0);
            let y = if rng.uniform() < 0.5 { 0.0 } else { 1.0 };
            let mut t = Tape::new();
            let x = t.constant(Tensor::new([1], vec![z]).unwrap());
            let l = focal_loss(&mut t, x, &Tensor::new([1], vec![y]).unwrap(), None, 0.0).unwrap();
            let p = 1.0 / (1.0 + (-z).exp());
            let bce = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            assert!((scalar(&t, l) - bce).abs() < 1e-9);
        }
    }

    #[test]
    fn focal_decreasing_in_pt() {
        let mut last = f64::INFINITY;
        for i in 1..100 {
            let p = i as f64 / 100.0;
            let v = focal_value(p, 1.0, Some(0.25), 2.0);
            assert!(v >= 0.0 && v < last);
            last = v;
        }
    }

    #[test]
    fn dice_examples() {
        let tgt = Tensor::new([4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let mut t = Tape::new();
        let same = t.constant(Tensor::new([4], vec![40.0, 40.0, -40.0, -40.0]).unwrap());
        let d = dice_loss(&mut t, same, &tgt).unwrap();
        assert!(scalar(&t, d) < 1e-12);
        let disjoint = t.constant(Tensor::new([4], vec![-40.0, -40.0, 40.0, 40.0]).unwrap());
        let d = dice_loss(&mut t, disjoint, &tgt).unwrap();
        assert!((scalar(&t, d) - (1.0 - 1.0 / 5.0)).abs() < 1e-12);
        let large_tgt = Tensor::from_fn([100], |i| if i < 50 { 1.0 } else { 0.0 });
        let disjoint = t.constant(Tensor::from_fn(
            [100],
            |i| if i < 50 { -40.0 } else { 40.0 },
        ));
        let d = dice_loss(&mut t, disjoint, &large_tgt).unwrap();
        assert!((scalar(&t, d) - 1.0).abs() < 0.01);
        // half overlap: prediction covers indices 25..75
        let half = t.constant(Tensor::from_fn([100], |i| {
            if (25..75).contains(&i) {
                40.0
            } else {
                -40.0
            }
        }));
        let d = dice_loss(&mut t, half, &large_tgt).unwrap();
        assert!((scalar(&t, d) - (1.0 - 51.0 / 101.0)).abs() < 1e-12);
    }

    #[test]
    fn gradients() {
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let x = Tensor::from_fn([3, 7], |_| rng.range(-3.0, 3.0));
            let y = Tensor::from_fn([3, 7], |_| if rng.uniform() < 0.4 { 1.0 } else { 0.0 });
            let r = finite_difference_check(
                |t, v| {
                    let a = focal_loss(t, v[0], &y, Some(0.25), 2.0)?;
                    let b = dice_rows(t, v[0], &y)?;
                    let b = t.sum(b)?;
                    t.add(a, b)
                },
                &[x],
                &FdOptions::default(),
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-6, "{r:?}");
        }
    }
}
