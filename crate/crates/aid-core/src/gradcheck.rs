//! Finite-difference verification of tape gradients.
//!
//! The reported figure per parameter is `max_i |g_tape - g_fd| /
//! max(1, |g_tape|, |g_fd|)`: an absolute error for small gradients, a
//! relative one for large gradients.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};

/// Builds a `1 x 1` loss from bound parameter leaves.
pub trait LossBuilder<S: Scalar> {
    fn build(&self, tape: &mut Tape<S>, params: &[TensorId]) -> Result<TensorId>;
}

impl<S: Scalar, F> LossBuilder<S> for F
where
    F: Fn(&mut Tape<S>, &[TensorId]) -> Result<TensorId>,
{
    fn build(&self, tape: &mut Tape<S>, params: &[TensorId]) -> Result<TensorId> {
        self(tape, params)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub ok: bool,
    /// Set when the tape or finite-difference gradient was non-finite.
    pub nonfinite: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.ok)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.ok)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "gradcheck: tolerance {:.1e}, fd step {:.1e}, {} parameters\n",
            self.tolerance,
            self.step,
            self.entries.len()
        ));
        for e in &self.entries {
            let status = if e.ok { "ok  " } else { "FAIL" };
            let note = if e.nonfinite { "  [non-finite]" } else { "" };
            out.push_str(&format!(
                "  {status}  {:<32} max rel err {:.3e}{note}\n",
                e.name, e.max_rel_err
            ));
        }
        out.push_str(&format!(
            "gradcheck: {} ({} failures, worst {:.3e})\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.failures().count(),
            self.max_rel_err()
        ));
        out
    }
}

/// Evaluate the loss once with fresh, non-trainable leaves.
fn eval_loss<S: Scalar>(params: &ParamSet<S>, build: &dyn LossBuilder<S>) -> Result<f64> {
    let mut tape = Tape::new();
    let ids = params.bind(&mut tape, false)?;
    let loss = build.build(&mut tape, &ids)?;
    if tape.shape(loss) != [1, 1] {
        return Err(Error::Contract(format!(
            "gradcheck loss must be 1x1, got {:?}",
            tape.shape(loss)
        )));
    }
    Ok(tape.data(loss)[0].to_f64())
}

/// One tape forward+backward; gradients in parameter order.
pub fn tape_gradients<S: Scalar>(
    params: &ParamSet<S>,
    build: &dyn LossBuilder<S>,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let ids = params.bind(&mut tape, true)?;
    let loss = build.build(&mut tape, &ids)?;
    if tape.shape(loss) != [1, 1] {
        return Err(Error::Contract(format!(
            "gradcheck loss must be 1x1, got {:?}",
            tape.shape(loss)
        )));
    }
    tape.backward(loss)?;
    Ok(params
        .gather_grads(&tape, &ids)
        .into_iter()
        .map(|g| g.into_iter().map(|x| x.to_f64()).collect())
        .collect())
}

/// Compare supplied gradients against central finite differences.
pub fn finite_diff_check<S: Scalar>(
    params: &ParamSet<S>,
    tape_grads: &[Vec<f64>],
    build: &dyn LossBuilder<S>,
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport> {
    let mut entries = Vec::with_capacity(params.len());
    let mut work = params.clone();
    for (pi, grad) in tape_grads.iter().enumerate() {
        let name = params.get(pi).name.clone();
        let mut max_err = 0.0f64;
        let mut nonfinite = false;
        for (ei, &g_tape) in grad.iter().enumerate() {
            let orig = work.get(pi).data[ei];
            let h = step * orig.to_f64().abs().max(1.0);

            work.get_mut(pi).data[ei] = S::from_f64(orig.to_f64() + h);
            let plus = eval_loss(&work, build)?;
            work.get_mut(pi).data[ei] = S::from_f64(orig.to_f64() - h);
            let minus = eval_loss(&work, build)?;
            work.get_mut(pi).data[ei] = orig;

            let g_fd = (plus - minus) / (2.0 * h);
            if !g_tape.is_finite() || !g_fd.is_finite() {
                nonfinite = true;
                max_err = f64::INFINITY;
                break;
            }
            let err = (g_tape - g_fd).abs() / 1.0f64.max(g_tape.abs()).max(g_fd.abs());
            max_err = max_err.max(err);
        }
        entries.push(GradCheckEntry {
            name,
            ok: max_err < tolerance && !nonfinite,
            max_rel_err: max_err,
            nonfinite,
        });
    }
    Ok(GradCheckReport {
        tolerance,
        step,
        entries,
    })
}

/// Full check: tape gradients vs central finite differences, per parameter.
pub fn gradcheck<S: Scalar>(
    params: &ParamSet<S>,
    build: &dyn LossBuilder<S>,
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport> {
    let grads = tape_gradients(params, build)?;
    finite_diff_check(params, &grads, build, tolerance, step)
}

// ── Full-model fixture ──────────────────────────────────────────────

/// Combined-loss check over every backbone and modulation parameter: one
/// winner/loser pair with fixed noise and t, the loss being
/// `diff + 1.0 * dpo + 0.1 * reg`. The modulation feature output layers
/// are perturbed away from their zero init so every branch carries
/// gradient.
pub fn full_model_check<S: Scalar>(
    cfg: &crate::model::ModelConfig,
    seed: u64,
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport> {
    let (params, build) = full_model_fixture::<S>(cfg, seed)?;
    gradcheck(&params, &build, tolerance, step)
}

pub fn full_model_fixture<S: Scalar>(
    cfg: &crate::model::ModelConfig,
    seed: u64,
) -> Result<(ParamSet<S>, impl LossBuilder<S>)> {
    use crate::model::{model_forward, AidBinding, TokenSequence};
    use crate::objectives::{diffusion_loss, dpo_loss, reg_loss, score_from_velocity};
    use crate::rng;

    cfg.validate()?;
    let backbone = crate::model::Backbone::<S>::init(cfg.clone())?;
    let mut aid = crate::aid::AidParams::<S>::init(cfg, seed)?;
    let mut r = rng::seeded(rng::derive(seed, 0x6763_6b)); // "gck"
    for i in 0..aid.params.len() {
        let p = aid.params.get_mut(i);
        if p.name.ends_with("feat.w2") || p.name.ends_with("feat.b2") {
            for x in p.data.iter_mut() {
                *x = S::from_f64(rng::normal_f64(&mut r) * 0.3);
            }
        }
    }
    let backbone_len = backbone.params.len();
    let merged = backbone.params.checked_merge(aid.params.clone())?;

    let m = cfg.image_len;
    let d = cfg.feature_dim;
    let x_pos = rng::normal_vec::<S>(&mut r, m * d);
    let x_neg = rng::normal_vec::<S>(&mut r, m * d);
    let noise = rng::normal_vec::<S>(&mut r, m * d);
    let t = 0.25 + 0.5 * rng::uniform_f64(&mut r);
    let mut tokens = vec![2u32, 8];
    tokens.resize(cfg.text_len, 0);
    let tokens = TokenSequence::new(tokens);
    let cfg = cfg.clone();

    let build = move |tape: &mut Tape<S>, ids: &[TensorId]| -> Result<TensorId> {
        let mut it = ids.iter().copied();
        let bids = crate::model::assemble_backbone_ids(&cfg, &mut it);
        let aids = crate::aid::assemble_aid_ids(cfg.num_blocks, &mut it);
        debug_assert_eq!(ids.len(), backbone_len + 10 * cfg.num_blocks);

        let mix = |x: &[S], e: &[S]| -> Vec<S> {
            let a = S::from_f64(1.0 - t);
            let b = S::from_f64(t);
            x.iter().zip(e).map(|(&x, &e)| a * x + b * e).collect()
        };
        let tgt = |x: &[S], e: &[S]| -> Vec<S> {
            x.iter().zip(e).map(|(&x, &e)| e - x).collect()
        };

        let binding = AidBinding::Learned {
            ids: &aids,
            skip: None,
        };
        let z_pos = tape.constant(mix(&x_pos, &noise), [m, d])?;
        let target_pos = tape.constant(tgt(&x_pos, &noise), [m, d])?;
        let out_pos = model_forward(tape, &cfg, &bids, None, z_pos, t, &tokens, &binding, None)?;
        let z_neg = tape.constant(mix(&x_neg, &noise), [m, d])?;
        let target_neg = tape.constant(tgt(&x_neg, &noise), [m, d])?;
        let out_neg = model_forward(tape, &cfg, &bids, None, z_neg, t, &tokens, &binding, None)?;

        let diff = diffusion_loss(tape, out_pos.velocity, target_pos)?;
        let s_pos = score_from_velocity(tape, out_pos.velocity, target_pos)?;
        let s_neg = score_from_velocity(tape, out_neg.velocity, target_neg)?;
        let dpo = dpo_loss(tape, s_pos, s_neg, 0.0, 0.0, 0.1)?;
        let alphas: Vec<TensorId> = out_pos
            .alphas
            .iter()
            .chain(out_neg.alphas.iter())
            .map(|&(_, a)| a)
            .collect();
        let reg = reg_loss(tape, &alphas)?;

        let wr = tape.scale_const(reg, 0.1)?;
        let sum = tape.add(diff, dpo)?;
        tape.add(sum, wr)
    };
    Ok((merged, build))
}
