//! Segmentation losses: mean pixel binary cross-entropy and soft Dice.

use crate::graph::{logistic, Graph, Var, LOG_FLOOR};
use crate::tensor::{Tensor, TensorResult};

/// Smoothing constant of the soft Dice loss.
pub const DICE_EPS: f64 = 1.0;

/// Per-item loss vectors, each shaped `[n]`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub seg: Var,
    pub dice: Var,
}

/// `logits` and `masks` are `[n, ...]` with identical shapes; returns per-item mean BCE of
/// `sigmoid(logits)` against the mask, and per-item `1 − (2Σpg + ε)/(Σp + Σg + ε)`.
pub fn per_item_losses(g: &mut Graph, logits: Var, masks: &Tensor) -> TensorResult<LossTerms> {
    let shape = g.shape(logits).to_vec();
    let n = shape[0];
    let per_item = masks.numel() / n;
    let complement = Tensor::new(masks.shape().to_vec(), masks.data().iter().map(|m| 1.0 - m).collect())?;
    let mask_sums = Tensor::new(vec![n], masks.data().chunks(per_item).map(|c| c.iter().sum()).collect())?;

    let m = g.constant(masks.clone());
    let not_m = g.constant(complement);
    let p = g.sigmoid(logits)?;
    let log_p = g.log(p)?;
    let q = g.scale(p, -1.0)?;
    let q = g.add_scalar(q, 1.0)?;
    let log_q = g.log(q)?;
    let pos = g.mul(log_p, m)?;
    let neg = g.mul(log_q, not_m)?;
    let ll = g.add(pos, neg)?;
    let ll = g.sum_per_item(ll)?;
    let seg = g.scale(ll, -1.0 / per_item as f64)?;

    let pg = g.mul(p, m)?;
    let inter = g.sum_per_item(pg)?;
    let sum_p = g.sum_per_item(p)?;
    let sum_g = g.constant(mask_sums);
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_EPS)?;
    let den = g.add(sum_p, sum_g)?;
    let den = g.add_scalar(den, DICE_EPS)?;
    let ratio = g.div(num, den)?;
    let dice = g.scale(ratio, -1.0)?;
    let dice = g.add_scalar(dice, 1.0)?;
    Ok(LossTerms { seg, dice })
}

/// Mean pixel BCE evaluated without a graph; same guarded-log formula as the graph path.
pub fn bce(logits: &[f64], mask: &[f64]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(mask)
        .map(|(&z, &y)| {
            let p = logistic(z);
            -(y * p.max(LOG_FLOOR).ln() + (1.0 - y) * (1.0 - p).max(LOG_FLOOR).ln())
        })
        .sum();
    total / logits.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn eval(logits: &Tensor, masks: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let t = per_item_losses(&mut g, l, masks).unwrap();
        (g.value(t.seg).data().to_vec(), g.value(t.dice).data().to_vec())
    }

    #[test]
    fn saturated_correct_is_near_zero() {
        let masks = Tensor::new(vec![1, 4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let logits = Tensor::new(vec![1, 4], vec![40.0, -40.0, 40.0, -40.0]).unwrap();
        let (seg, dice) = eval(&logits, &masks);
        assert!(seg[0] < 1e-6);
        assert!(dice[0] < 1e-6);
    }

    #[test]
    fn all_ones_prediction_and_mask_gives_zero_dice_loss() {
        let masks = Tensor::filled(&[1, 8], 1.0);
        // p rounds to exactly 1.0 for large logits
        let logits = Tensor::filled(&[1, 8], 60.0);
        let (_, dice) = eval(&logits, &masks);
        assert_eq!(dice[0], 0.0);
    }

    #[test]
    fn zero_logits_give_ln2() {
        let masks = Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (seg, _) = eval(&Tensor::zeros(&[1, 4]), &masks);
        assert!((seg[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce(&[0.0; 4], masks.data()) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (n, px) = (3, 50);
        let logits: Vec<f64> = (0..n * px).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let mask: Vec<f64> = (0..n * px).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let (seg, dice) = eval(
            &Tensor::new(vec![n, px], logits.clone()).unwrap(),
            &Tensor::new(vec![n, px], mask.clone()).unwrap(),
        );
        for i in 0..n {
            let mut ce = 0.0;
            let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
            for j in 0..px {
                let z = logits[i * px + j];
                let y = mask[i * px + j];
                let p = 1.0 / (1.0 + (-z).exp());
                ce += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
                inter += p * y;
                sp += p;
                sg += y;
            }
            assert!((seg[i] - ce / px as f64).abs() < 1e-10);
            assert!((dice[i] - (1.0 - (2.0 * inter + 1.0) / (sp + sg + 1.0))).abs() < 1e-10);
        }
    }
}
