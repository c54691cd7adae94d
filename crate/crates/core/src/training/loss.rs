use std::rc::Rc;

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Probability clamp used by the pen-state cross-entropy.
pub const PEN_CLAMP: f64 = 1e-7;

fn check_mask(mask: &[bool], n: usize) -> Result<usize> {
    if mask.len() != n {
        return Err(Error::Shape(format!("mask has {} entries for {n} positions", mask.len())));
    }
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::InvalidArgument("loss mask is empty".into())),
        k => Ok(k),
    }
}

/// Mean over unmasked positions of the squared L2 error between rows of
/// `[n x 2]` noise and its estimate.
pub fn stroke_loss(eps: &Tensor, eps_hat: &Tensor, mask: &[bool]) -> Result<f64> {
    if eps.shape() != eps_hat.shape() {
        return Err(Error::Shape("eps and eps_hat differ in shape".into()));
    }
    let k = check_mask(mask, eps.rows())?;
    let total: f64 = (0..eps.rows())
        .filter(|&r| mask[r])
        .map(|r| {
            eps.row_slice(r)
                .iter()
                .zip(eps_hat.row_slice(r))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(total / k as f64)
}

/// Mean over unmasked positions of the binary cross-entropy between pen
/// flags and predicted lift probabilities, clamped to `[1e-7, 1 - 1e-7]`.
pub fn pen_loss(d0: &[f64], pen_prob: &[f64], mask: &[bool]) -> Result<f64> {
    if d0.len() != pen_prob.len() {
        return Err(Error::Shape("pen targets and probabilities differ in length".into()));
    }
    let k = check_mask(mask, d0.len())?;
    let total: f64 = d0
        .iter()
        .zip(pen_prob)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&t, &p), _)| {
            let p = p.clamp(PEN_CLAMP, 1.0 - PEN_CLAMP);
            -t * p.ln() - (1.0 - t) * (1.0 - p).ln()
        })
        .sum();
    Ok(total / k as f64)
}

/// Tape version of [`stroke_loss`] for an unpadded sequence.
pub fn stroke_loss_var(tape: &Tape, eps: &Tensor, eps_hat: Var) -> Var {
    let n = eps.rows() as f64;
    let diff = tape.sub(eps_hat, tape.constant(eps.clone()));
    tape.scale(tape.sum_all(tape.mul(diff, diff)), 1.0 / n)
}

/// Tape version of [`pen_loss`] for an unpadded sequence.
pub fn pen_loss_var(tape: &Tape, d0: &[f64], pen_prob: Var) -> Var {
    let n = d0.len();
    let target = Rc::new(Tensor::new(n, 1, d0.to_vec()));
    tape.scale(tape.bce_sum(pen_prob, target, PEN_CLAMP), 1.0 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stroke_loss_values() {
        let e = Tensor::new(1, 2, vec![1.0, 0.0]);
        assert_eq!(stroke_loss(&e, &e, &[true]).unwrap(), 0.0);
        assert_eq!(stroke_loss(&e, &Tensor::zeros(1, 2), &[true]).unwrap(), 1.0);
        assert!(stroke_loss(&e, &e, &[false]).is_err());
    }

    #[test]
    fn stroke_loss_ignores_masked_padding() {
        let e = Tensor::new(2, 2, vec![1.0, 2.0, 0.0, 0.0]);
        let h = Tensor::new(2, 2, vec![0.5, 1.0, 0.0, 0.0]);
        let base = stroke_loss(&e.slice_rows(0, 1), &h.slice_rows(0, 1), &[true]).unwrap();
        let padded_e = Tensor::new(2, 2, vec![1.0, 2.0, 9.0, -3.0]);
        assert_eq!(stroke_loss(&padded_e, &h, &[true, false]).unwrap(), base);
    }

    #[test]
    fn pen_loss_values() {
        let near = pen_loss(&[1.0], &[1.0 - 1e-7], &[true]).unwrap();
        assert!((near - 1e-7).abs() < 1e-12);
        let half = pen_loss(&[1.0, 0.0, 1.0], &[0.5; 3], &[true; 3]).unwrap();
        assert!((half - 0.693147).abs() < 1e-6);
        // Exact 0 and 1 are clamped rather than producing infinities.
        assert!(pen_loss(&[1.0], &[0.0], &[true]).unwrap().is_finite());
    }

    proptest! {
        #[test]
        fn pen_loss_symmetric(pairs in prop::collection::vec((0u8..2, 0.001f64..0.999), 1..20)) {
            let d: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let q: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let d2: Vec<f64> = d.iter().map(|v| 1.0 - v).collect();
            let q2: Vec<f64> = q.iter().map(|v| 1.0 - v).collect();
            let m = vec![true; d.len()];
            let a = pen_loss(&d, &q, &m).unwrap();
            let b = pen_loss(&d2, &q2, &m).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a >= 0.0);
        }
    }

    #[test]
    fn tape_versions_agree() {
        let tape = Tape::new();
        let eps = Tensor::new(3, 2, vec![0.1, -0.4, 1.2, 0.3, -0.8, 0.0]);
        let hat = Tensor::new(3, 2, vec![0.0, -0.5, 1.0, 0.2, -0.1, 0.3]);
        let v = stroke_loss_var(&tape, &eps, tape.constant(hat.clone()));
        let want = stroke_loss(&eps, &hat, &[true; 3]).unwrap();
        assert!((tape.value(v).item() - want).abs() < 1e-15);
        let d0 = [0.0, 1.0, 0.0];
        let p = [0.2, 0.7, 0.4];
        let pv = pen_loss_var(&tape, &d0, tape.constant(Tensor::new(3, 1, p.to_vec())));
        assert!((tape.value(pv).item() - pen_loss(&d0, &p, &[true; 3]).unwrap()).abs() < 1e-15);
    }
}
