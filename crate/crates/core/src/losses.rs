//! Training losses on sigmoid probabilities.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{lit, Scalar};

/// Additive smoothing of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;
/// Probabilities are clamped to `[ε, 1 − ε]` before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

fn same_shape<T: Scalar>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// `1 − (2·Σp·t + s) / (Σp + Σt + s)` over the whole batch.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, target: Var, smooth: T) -> Result<Var> {
    same_shape(g, "dice_loss", probs, target)?;
    let pt = g.mul(probs, target)?;
    let inter = g.sum(pt)?;
    let sp = g.sum(probs)?;
    let st = g.sum(target)?;
    let num = g.scale(inter, lit(2.0))?;
    let num = g.add_scalar(num, smooth)?;
    let den = g.add(sp, st)?;
    let den = g.add_scalar(den, smooth)?;
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, lit(-1.0))?;
    g.add_scalar(neg, T::one())
}

/// Mean binary cross-entropy `−[t·ln p + (1−t)·ln(1−p)]` with clamped `p`.
pub fn bce_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, target: Var) -> Result<Var> {
    same_shape(g, "bce_loss", probs, target)?;
    let eps: T = lit(PROB_EPS);
    let p = g.clamp(probs, eps, T::one() - eps)?;
    let log_p = g.ln(p)?;
    let neg_p = g.scale(p, lit(-1.0))?;
    let one_minus_p = g.add_scalar(neg_p, T::one())?;
    let log_q = g.ln(one_minus_p)?;
    let neg_t = g.scale(target, lit(-1.0))?;
    let one_minus_t = g.add_scalar(neg_t, T::one())?;
    let a = g.mul(target, log_p)?;
    let b = g.mul(one_minus_t, log_q)?;
    let ll = g.add(a, b)?;
    let m = g.mean(ll)?;
    g.scale(m, lit(-1.0))
}

/// Unweighted sum of soft Dice loss and binary cross-entropy.
pub fn combined_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, target: Var) -> Result<Var> {
    let d = dice_loss(g, probs, target, lit(DICE_SMOOTH))?;
    let c = bce_loss(g, probs, target)?;
    g.add(d, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn eval(
        f: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
        p: &[f64],
        t: &[f64],
    ) -> f64 {
        let mut g = Graph::new();
        let pv = g.input(Tensor::new(vec![p.len()], p.to_vec()).unwrap()).unwrap();
        let tv = g.input(Tensor::new(vec![t.len()], t.to_vec()).unwrap()).unwrap();
        let l = f(&mut g, pv, tv).unwrap();
        g.value(l).item().unwrap()
    }

    fn dice(g: &mut Graph<f64>, p: Var, t: Var) -> Result<Var> {
        dice_loss(g, p, t, 1.0)
    }

    #[test]
    fn dice_examples() {
        let m = [1.0, 0.0, 1.0, 1.0];
        assert_eq!(eval(dice, &m, &m), 0.0);
        let l = eval(dice, &[1.0; 4], &[1.0, 1.0, 0.0, 0.0]);
        assert!((l - 2.0 / 7.0).abs() < 1e-15);
        assert_eq!(eval(dice, &[0.0; 4], &[0.0; 4]), 0.0);
    }

    #[test]
    fn dice_is_symmetric() {
        let p = [0.2, 0.9, 0.4, 0.0];
        let t = [0.0, 1.0, 1.0, 0.0];
        assert_eq!(eval(dice, &p, &t), eval(dice, &t, &p));
    }

    #[test]
    fn dice_zero_only_at_equality_on_binary_masks() {
        let masks: Vec<[f64; 3]> = (0..8)
            .map(|b| [(b & 1) as f64, ((b >> 1) & 1) as f64, ((b >> 2) & 1) as f64])
            .collect();
        for p in &masks {
            for t in &masks {
                let l = eval(dice, p, t);
                assert_eq!(l == 0.0, p == t, "p={p:?} t={t:?} loss={l}");
            }
        }
    }

    #[test]
    fn bce_examples() {
        let l = eval(bce_loss, &[0.5], &[1.0]);
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = eval(bce_loss, &[0.5, 0.5, 0.5], &[0.0, 1.0, 1.0]);
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = eval(bce_loss, &[1.0, 0.0], &[1.0, 0.0]);
        assert!((0.0..1e-6).contains(&l));
    }

    #[test]
    fn combined_is_sum_of_parts() {
        let p = [0.1, 0.8, 0.35, 0.6, 0.99];
        let t = [0.0, 1.0, 1.0, 0.0, 1.0];
        let c = eval(combined_loss, &p, &t);
        let parts = eval(dice, &p, &t) + eval(bce_loss, &p, &t);
        assert!((c - parts).abs() < 1e-15);
        let perfect = eval(combined_loss, &t, &t);
        assert!(perfect < 1e-5);
    }

    #[test]
    fn shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::zeros(&[3])).unwrap();
        let t = g.input(Tensor::zeros(&[4])).unwrap();
        assert!(dice_loss(&mut g, p, t, 1.0).is_err());
        assert!(bce_loss(&mut g, p, t).is_err());
    }
}
