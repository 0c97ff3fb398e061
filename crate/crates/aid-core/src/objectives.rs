//! The three loss components and their weighted combination: flow-matching
//! velocity error, preference (DPO) loss against a frozen reference, and
//! the coefficient-norm regularizer.

use crate::error::{Error, Result};
use crate::model::TokenSequence;
use crate::scalar::{log_sigmoid, Scalar};
use crate::tensor::{Tape, TensorId};
use crate::toydata::ToyGrid;

/// One flow-matching training point: clean data, noise, time, condition.
/// The interpolant `z_t = (1-t) x + t eps` and target velocity `eps - x`
/// are recomputed from the fields, never stored.
#[derive(Debug, Clone)]
pub struct FlowSample<S> {
    pub x: Vec<S>,
    pub noise: Vec<S>,
    pub t: f64,
    pub tokens: TokenSequence,
}

impl<S: Scalar> FlowSample<S> {
    pub fn interpolant(&self) -> Vec<S> {
        let a = S::from_f64(1.0 - self.t);
        let b = S::from_f64(self.t);
        self.x
            .iter()
            .zip(&self.noise)
            .map(|(&x, &e)| a * x + b * e)
            .collect()
    }

    pub fn target_velocity(&self) -> Vec<S> {
        self.x
            .iter()
            .zip(&self.noise)
            .map(|(&x, &e)| e - x)
            .collect()
    }
}

/// A preference pair: one condition, a rule-correct winner and a loser
/// whose attribute vector differs in exactly one place. Winner/loser roles
/// are fixed at construction; the shared (noise, t) are drawn at loss time.
#[derive(Debug, Clone)]
pub struct PreferencePair {
    pub tokens: TokenSequence,
    pub winner_latent: Vec<f32>,
    pub loser_latent: Vec<f32>,
    pub winner_grid: ToyGrid,
    pub loser_grid: ToyGrid,
    pub corrupted: CorruptedAttribute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptedAttribute {
    Color,
    Count,
}

/// Exact bookkeeping of one combined-loss evaluation:
/// `total = diff + lambda_dpo * dpo + lambda_reg * reg`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub diff: f64,
    pub dpo: f64,
    pub reg: f64,
    pub total: f64,
    pub lambda_dpo: f64,
    pub lambda_reg: f64,
    pub beta: f64,
}

/// Combine components; the `total` field satisfies the identity above
/// bit for bit because it is computed by this one expression.
pub fn total_loss(
    diff: f64,
    dpo: f64,
    reg: f64,
    lambda_dpo: f64,
    lambda_reg: f64,
    beta: f64,
) -> LossBreakdown {
    LossBreakdown {
        diff,
        dpo,
        reg,
        total: diff + lambda_dpo * dpo + lambda_reg * reg,
        lambda_dpo,
        lambda_reg,
        beta,
    }
}

/// Mean over all entries of the squared velocity error.
pub fn diffusion_loss<S: Scalar>(
    tape: &mut Tape<S>,
    v_pred: TensorId,
    target: TensorId,
) -> Result<TensorId> {
    tape.mse(v_pred, target)
}

/// Implicit score: negative summed squared velocity error. Perfect
/// prediction scores 0; anything else is strictly negative.
pub fn score_from_velocity<S: Scalar>(
    tape: &mut Tape<S>,
    v_pred: TensorId,
    target: TensorId,
) -> Result<TensorId> {
    let diff = tape.sub(v_pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let sum = tape.sum_all(sq)?;
    tape.scale_const(sum, -1.0)
}

/// `-log sigmoid(beta ((s_theta+ - s_theta-) - (s_ref+ - s_ref-)))` with the
/// reference gap folded in as a constant, so gradients flow only through
/// the live scores.
pub fn dpo_loss<S: Scalar>(
    tape: &mut Tape<S>,
    s_theta_pos: TensorId,
    s_theta_neg: TensorId,
    s_ref_pos: f64,
    s_ref_neg: f64,
    beta: f64,
) -> Result<TensorId> {
    if beta <= 0.0 {
        return Err(Error::Contract(format!("beta = {beta} must be positive")));
    }
    let d_theta = tape.sub(s_theta_pos, s_theta_neg)?;
    let ref_gap = tape.scalar(S::from_f64(s_ref_pos - s_ref_neg));
    let centered = tape.sub(d_theta, ref_gap)?;
    let scaled = tape.scale_const(centered, beta)?;
    let ls = tape.log_sigmoid(scaled)?;
    tape.scale_const(ls, -1.0)
}

/// Scalar mirror of `dpo_loss` for evaluation and oracle tests.
pub fn dpo_loss_value(
    s_theta_pos: f64,
    s_theta_neg: f64,
    s_ref_pos: f64,
    s_ref_neg: f64,
    beta: f64,
) -> f64 {
    let gap = (s_theta_pos - s_theta_neg) - (s_ref_pos - s_ref_neg);
    -log_sigmoid(beta * gap)
}

/// Mean Euclidean norm of the coefficient vectors produced in one step.
/// All alphas must share the token count.
pub fn reg_loss<S: Scalar>(tape: &mut Tape<S>, alphas: &[TensorId]) -> Result<TensorId> {
    if alphas.is_empty() {
        return Err(Error::Contract(
            "reg_loss over an empty alpha list".into(),
        ));
    }
    let mut stacked = tape.transpose(alphas[0])?;
    for &a in &alphas[1..] {
        let row = tape.transpose(a)?;
        stacked = tape.concat_rows(stacked, row)?;
    }
    let norms = tape.l2_norm_rows(stacked)?;
    tape.mean_all(norms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn diffusion_loss_oracle_cases() {
        let mut tape = Tape::<f64>::new();
        let x = vec![0.5, -1.0, 2.0, 0.0];
        let noise = vec![1.0, 1.0, -1.0, 0.5];
        let sample = FlowSample {
            x: x.clone(),
            noise: noise.clone(),
            t: 0.3,
            tokens: TokenSequence::new(vec![]),
        };
        let target = tape.constant(sample.target_velocity(), [2, 2]).unwrap();

        // Perfect prediction scores exactly zero.
        let perfect = tape.constant(sample.target_velocity(), [2, 2]).unwrap();
        let l0 = diffusion_loss(&mut tape, perfect, target).unwrap();
        assert_eq!(tape.data(l0)[0], 0.0);

        // Off by +1 everywhere gives exactly 1.
        let off: Vec<f64> = sample.target_velocity().iter().map(|v| v + 1.0).collect();
        let off = tape.constant(off, [2, 2]).unwrap();
        let l1 = diffusion_loss(&mut tape, off, target).unwrap();
        assert!((tape.data(l1)[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn diffusion_loss_matches_naive_loop() {
        let mut r = rng::seeded(8);
        let a = rng::normal_vec::<f64>(&mut r, 12);
        let b = rng::normal_vec::<f64>(&mut r, 12);
        let mut tape = Tape::<f64>::new();
        let ta = tape.constant(a.clone(), [3, 4]).unwrap();
        let tb = tape.constant(b.clone(), [3, 4]).unwrap();
        let l = diffusion_loss(&mut tape, ta, tb).unwrap();
        let mut naive = 0.0;
        for i in 0..12 {
            naive += (a[i] - b[i]) * (a[i] - b[i]);
        }
        naive /= 12.0;
        assert!((tape.data(l)[0] - naive).abs() < 1e-10);
    }

    #[test]
    fn diffusion_loss_permutation_invariant() {
        let mut r = rng::seeded(9);
        let a = rng::normal_vec::<f64>(&mut r, 8);
        let b = rng::normal_vec::<f64>(&mut r, 8);
        let perm = [3usize, 1, 0, 2];
        let ap: Vec<f64> = perm.iter().flat_map(|&i| a[i * 2..i * 2 + 2].to_vec()).collect();
        let bp: Vec<f64> = perm.iter().flat_map(|&i| b[i * 2..i * 2 + 2].to_vec()).collect();
        let mut tape = Tape::<f64>::new();
        let t1 = {
            let x = tape.constant(a, [4, 2]).unwrap();
            let y = tape.constant(b, [4, 2]).unwrap();
            let l = diffusion_loss(&mut tape, x, y).unwrap();
            tape.data(l)[0]
        };
        let t2 = {
            let x = tape.constant(ap, [4, 2]).unwrap();
            let y = tape.constant(bp, [4, 2]).unwrap();
            let l = diffusion_loss(&mut tape, x, y).unwrap();
            tape.data(l)[0]
        };
        assert!((t1 - t2).abs() < 1e-12);
    }

    #[test]
    fn score_identities() {
        let mut r = rng::seeded(10);
        let v = rng::normal_vec::<f64>(&mut r, 6);
        let u = rng::normal_vec::<f64>(&mut r, 6);
        let mut tape = Tape::<f64>::new();
        let tv = tape.constant(v, [2, 3]).unwrap();
        let tu = tape.constant(u, [2, 3]).unwrap();

        // Perfect prediction has the maximal score 0.
        let s0 = score_from_velocity(&mut tape, tu, tu).unwrap();
        assert_eq!(tape.data(s0)[0], 0.0);

        // Imperfect prediction is strictly negative.
        let s = score_from_velocity(&mut tape, tv, tu).unwrap();
        assert!(tape.data(s)[0] < 0.0);

        // s = -(numel) * mean-squared-error, as an algebraic cross-check.
        let l = diffusion_loss(&mut tape, tv, tu).unwrap();
        let lhs = tape.data(s)[0];
        let rhs = -6.0 * tape.data(l)[0];
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn dpo_loss_oracle_cases() {
        // Equal gaps: -ln sigmoid(0) = ln 2.
        let v = dpo_loss_value(2.0, 1.0, 4.0, 3.0, 0.1);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);

        // Saturated preference: essentially zero loss.
        assert!(dpo_loss_value(500.0, 0.0, 0.0, 0.0, 0.1) < 1e-20);

        // beta 0.1 with a gap of 10: -ln sigmoid(1).
        let v = dpo_loss_value(10.0, 0.0, 0.0, 0.0, 0.1);
        let expect = -(1.0f64 / (1.0 + (-1.0f64).exp())).ln();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn dpo_tape_matches_scalar_and_descends_in_gap() {
        let mut tape = Tape::<f64>::new();
        let sp = tape.leaf(vec![3.0], [1, 1], true).unwrap();
        let sn = tape.leaf(vec![1.0], [1, 1], true).unwrap();
        let l = dpo_loss(&mut tape, sp, sn, 0.5, 0.25, 0.1).unwrap();
        let want = dpo_loss_value(3.0, 1.0, 0.5, 0.25, 0.1);
        assert!((tape.data(l)[0] - want).abs() < 1e-12);

        // Strictly decreasing in the live gap.
        let mut prev = f64::INFINITY;
        for gap in [-2.0, -0.5, 0.0, 0.5, 2.0, 5.0] {
            let cur = dpo_loss_value(gap, 0.0, 0.0, 0.0, 0.1);
            assert!(cur < prev);
            prev = cur;
        }

        // Gradient flows into both live scores, antisymmetrically.
        tape.backward(l).unwrap();
        let gp = tape.grad(sp).unwrap()[0];
        let gn = tape.grad(sn).unwrap()[0];
        assert!(gp < 0.0 && gn > 0.0);
        assert!((gp + gn).abs() < 1e-15);
    }

    #[test]
    fn reg_loss_oracle_cases() {
        let mut tape = Tape::<f64>::new();
        // Single vector [0.3, 0.4] has norm 0.5.
        let a = tape.constant(vec![0.3, 0.4], [2, 1]).unwrap();
        let l = reg_loss(&mut tape, &[a]).unwrap();
        assert!((tape.data(l)[0] - 0.5).abs() < 1e-12);

        // All-zero coefficients give zero.
        let z = tape.constant(vec![0.0, 0.0], [2, 1]).unwrap();
        let l0 = reg_loss(&mut tape, &[z]).unwrap();
        assert_eq!(tape.data(l0)[0], 0.0);

        // Mean over vectors: {[1,0], [0,0]} -> 0.5.
        let v1 = tape.constant(vec![1.0, 0.0], [2, 1]).unwrap();
        let v2 = tape.constant(vec![0.0, 0.0], [2, 1]).unwrap();
        let lm = reg_loss(&mut tape, &[v1, v2]).unwrap();
        assert!((tape.data(lm)[0] - 0.5).abs() < 1e-12);

        // Empty list violates the contract.
        assert!(matches!(
            reg_loss(&mut tape, &[]).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn reg_loss_is_absolutely_homogeneous() {
        let mut r = rng::seeded(11);
        for k in [-2.5f64, -1.0, 0.0, 0.3, 4.0] {
            let vals = rng::normal_vec::<f64>(&mut r, 5);
            let scaled: Vec<f64> = vals.iter().map(|v| v * k).collect();
            let mut tape = Tape::<f64>::new();
            let a = tape.constant(vals, [5, 1]).unwrap();
            let b = tape.constant(scaled, [5, 1]).unwrap();
            let la = reg_loss(&mut tape, &[a]).unwrap();
            let lb = reg_loss(&mut tape, &[b]).unwrap();
            let lhs = tape.data(lb)[0];
            let rhs = k.abs() * tape.data(la)[0];
            assert!((lhs - rhs).abs() < 1e-9, "k={k}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn total_loss_identity_and_ablation() {
        let b = total_loss(1.0, 0.5, 0.2, 1.0, 0.1, 0.1);
        assert_eq!(b.total, 1.0 + 1.0 * 0.5 + 0.1 * 0.2);
        assert!((b.total - 1.52).abs() < 1e-12);

        let zero = total_loss(0.0, 0.0, 0.0, 1.0, 0.1, 0.1);
        assert_eq!(zero.total, 0.0);

        // Zero weights reduce to the pure flow-matching objective.
        let sft = total_loss(0.7, 123.0, 456.0, 0.0, 0.0, 0.1);
        assert_eq!(sft.total, 0.7);
    }

    #[test]
    fn interpolant_is_recomputable_exactly() {
        let s = FlowSample::<f32> {
            x: vec![1.0, -2.0],
            noise: vec![0.5, 0.25],
            t: 0.25,
            tokens: TokenSequence::new(vec![]),
        };
        let z = s.interpolant();
        for (i, &zi) in z.iter().enumerate() {
            let again = (1.0 - 0.25f32) * s.x[i] + 0.25f32 * s.noise[i];
            assert_eq!(zi, again);
        }
    }
}
