//! Optimization loops: backbone pretraining on the flow-matching loss, and
//! modulation training over a frozen backbone with the combined
//! flow + preference + coefficient-norm objective, Bernoulli module
//! skipping, gradient accumulation, and deterministic seeding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::aid::{self, AidParams};
use crate::error::{Error, Result};
use crate::lora::LoraParams;
use crate::model::{model_forward, AidBinding, Backbone, ModelConfig};
use crate::objectives::{
    diffusion_loss, dpo_loss, reg_loss, score_from_velocity, total_loss, FlowSample,
    LossBreakdown, PreferencePair,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng;
use crate::sampler::{sample, SampleSource, SamplerConfig};
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};
use crate::toydata::{self, ToyGrid, ToyPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Train the modulation stack on flow matching + regularizer only.
    Sft,
    /// Train the modulation stack on the full combined loss.
    Dpo,
    /// Low-rank backbone deltas instead of modulation, flow matching only.
    LoraSft,
    /// Low-rank backbone deltas with the preference loss added.
    LoraDpo,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Sft => "sft",
            TrainMode::Dpo => "dpo",
            TrainMode::LoraSft => "lora_sft",
            TrainMode::LoraDpo => "lora_dpo",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(TrainMode::Sft),
            "dpo" => Ok(TrainMode::Dpo),
            "lora_sft" => Ok(TrainMode::LoraSft),
            "lora_dpo" => Ok(TrainMode::LoraDpo),
            other => Err(Error::Config(format!(
                "train.mode must be sft|dpo|lora_sft|lora_dpo, got {other}"
            ))),
        }
    }

    pub fn uses_aid(self) -> bool {
        matches!(self, TrainMode::Sft | TrainMode::Dpo)
    }

    pub fn uses_preference(self) -> bool {
        matches!(self, TrainMode::Dpo | TrainMode::LoraDpo)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_dpo: f64,
    pub lambda_reg: f64,
    pub beta: f64,
    pub skip_p: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub grad_accum: usize,
    pub lora_rank: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 400,
            batch_size: 8,
            learning_rate: 2e-3,
            lambda_dpo: 1.0,
            lambda_reg: 0.1,
            beta: 0.1,
            skip_p: 0.1,
            seed: 1,
            mode: TrainMode::Dpo,
            grad_accum: 1,
            lora_rank: crate::lora::DEFAULT_RANK,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.skip_p) {
            return Err(Error::Config(format!(
                "train.skip_p must lie in [0, 1], got {}",
                self.skip_p
            )));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config("train.beta must be > 0".into()));
        }
        if self.lambda_dpo < 0.0 || self.lambda_reg < 0.0 {
            return Err(Error::Config("train loss weights must be >= 0".into()));
        }
        if self.grad_accum == 0 {
            return Err(Error::Config("train.grad_accum must be >= 1".into()));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("train.lora_rank must be >= 1".into()));
        }
        Ok(())
    }

    /// The preference weight actually applied under the mode.
    pub fn effective_lambda_dpo(&self) -> f64 {
        if self.mode.uses_preference() {
            self.lambda_dpo
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of swapping the prompt for the null sequence, which
    /// trains the unconditional branch used by guidance.
    pub cond_dropout: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 600,
            batch_size: 8,
            learning_rate: 2e-3,
            cond_dropout: 0.1,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("pretrain.learning_rate must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!(
                "pretrain.cond_dropout must lie in [0, 1], got {}",
                self.cond_dropout
            )));
        }
        Ok(())
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub mean_abs_alpha: f64,
    pub preference_accuracy: f64,
}

/// Serializable optimizer/rng position; restoring it replays the original
/// trajectory bit for bit under the same config.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub opt: AdamState,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

impl TrainState {
    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = rng::seeded(self.rng_seed);
        r.set_word_pos(self.rng_word_pos);
        r
    }
}

pub struct TrainRun {
    pub mode: TrainMode,
    pub aid: Option<AidParams<f32>>,
    pub lora: Option<LoraParams<f32>>,
    pub logs: Vec<StepLog>,
    pub state: TrainState,
}

pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub init_val_loss: f64,
    pub final_val_loss: f64,
}

// ── Shared draw order ───────────────────────────────────────────────

/// All randomness of one micro-batch, drawn in this fixed order: the skip
/// mask (when masking applies), then per element (pair index, t, noise).
#[derive(Debug, Clone)]
pub struct StepDraw {
    pub mask: Option<Vec<bool>>,
    pub picks: Vec<(usize, f64, Vec<f32>)>,
}

pub fn step_randomness(
    r: &mut ChaCha8Rng,
    num_blocks: usize,
    skip_p: Option<f64>,
    batch: usize,
    pool: usize,
    latent_len: usize,
) -> Result<StepDraw> {
    let mask = match skip_p {
        Some(p) => Some(aid::skip_mask(num_blocks, p, r)?),
        None => None,
    };
    let mut picks = Vec::with_capacity(batch);
    for _ in 0..batch {
        let idx = r.gen_range(0..pool);
        let t = rng::uniform_f64(r);
        let noise = rng::normal_vec::<f32>(r, latent_len);
        picks.push((idx, t, noise));
    }
    Ok(StepDraw { mask, picks })
}

/// Left-fold scalar nodes and divide by the count; shared by training and
/// evaluation paths so their float rounding agrees exactly.
pub fn mean_scalar_nodes<S: Scalar>(tape: &mut Tape<S>, nodes: &[TensorId]) -> Result<TensorId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    tape.scale_const(acc, 1.0 / nodes.len() as f64)
}

// ── Backbone pretraining ────────────────────────────────────────────

/// Train the toy backbone with the flow-matching loss only (a stand-in
/// for a frozen pretrained model). Aborts with a diagnostic on divergence.
pub fn pretrain_backbone(
    model_cfg: &ModelConfig,
    data: &[(ToyPrompt, ToyGrid)],
    val_data: &[(ToyPrompt, ToyGrid)],
    cfg: &PretrainConfig,
) -> Result<(Backbone<f32>, PretrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("pretraining needs a nonempty dataset".into()));
    }
    let mut backbone = Backbone::<f32>::init(model_cfg.clone())?;
    let init_val_loss = validation_diffusion_loss(&backbone, None, None, val_data, cfg.seed)?;

    let d = model_cfg.feature_dim;
    let m = model_cfg.image_len;
    let mut r = rng::seeded(cfg.seed);
    let mut opt = AdamState::zeros(&backbone.params);
    let null = toydata::null_tokens(model_cfg.text_len);
    let mut losses = Vec::with_capacity(cfg.steps as usize);

    for step in 0..cfg.steps {
        // Draw order per element: index, t, dropout coin, noise.
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = r.gen_range(0..data.len());
            let t = rng::uniform_f64(&mut r);
            let drop = rng::uniform_f64(&mut r) < cfg.cond_dropout;
            let noise = rng::normal_vec::<f32>(&mut r, m * d);
            batch.push((idx, t, drop, noise));
        }

        let mut tape = Tape::<f32>::new();
        let id_list = backbone.params.bind(&mut tape, true)?;
        let ids = crate::model::assemble_backbone_ids(model_cfg, &mut id_list.iter().copied());
        let mut per_element = Vec::with_capacity(cfg.batch_size);
        for (idx, t, drop, noise) in &batch {
            let (prompt, grid) = &data[*idx];
            let sample = FlowSample {
                x: toydata::encode::<f32>(grid, d)?,
                noise: noise.clone(),
                t: *t,
                tokens: if *drop { null.clone() } else { prompt.tokens.clone() },
            };
            let z_t = tape.constant(sample.interpolant(), [m, d])?;
            let target = tape.constant(sample.target_velocity(), [m, d])?;
            let out = model_forward(
                &mut tape,
                model_cfg,
                &ids,
                None,
                z_t,
                sample.t,
                &sample.tokens,
                &AidBinding::Off,
                None,
            )?;
            per_element.push(diffusion_loss(&mut tape, out.velocity, target)?);
        }
        let loss = mean_scalar_nodes(&mut tape, &per_element)?;
        let loss_value = tape.data(loss)[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::numeric(
                format!("pretraining step {step}"),
                format!("loss diverged to {loss_value}"),
            ));
        }
        tape.backward(loss)?;
        let grads = backbone.params.gather_grads(&tape, &id_list);
        adam_step(&mut backbone.params, &grads, cfg.learning_rate, &cfg.adam, &mut opt)?;
        losses.push(loss_value);
    }

    let final_val_loss = validation_diffusion_loss(&backbone, None, None, val_data, cfg.seed)?;
    Ok((
        backbone,
        PretrainReport {
            losses,
            init_val_loss,
            final_val_loss,
        },
    ))
}

// ── Modulation / low-rank training ──────────────────────────────────

/// What to continue from when resuming a run.
pub struct ResumePoint {
    pub aid: Option<AidParams<f32>>,
    pub lora: Option<LoraParams<f32>>,
    pub state: TrainState,
    pub steps_done: u64,
}

/// Train the mode's trainable surface over a frozen backbone. The backbone
/// byte hash is checked before and after; any change is an invariant
/// violation.
pub fn train_aid(
    backbone: &Backbone<f32>,
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
    resume: Option<ResumePoint>,
) -> Result<TrainRun> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Contract("training needs nonempty preference pairs".into()));
    }
    let model_cfg = &backbone.config;
    let hash_before = backbone.params.content_hash();

    let mut aid_params: Option<AidParams<f32>>;
    let mut lora_params: Option<LoraParams<f32>>;
    let mut opt: AdamState;
    let mut r: ChaCha8Rng;
    let start_step: u64;
    match resume {
        Some(point) => {
            aid_params = point.aid;
            lora_params = point.lora;
            opt = point.state.opt.clone();
            r = point.state.rng();
            start_step = point.steps_done;
            if cfg.mode.uses_aid() && aid_params.is_none() {
                return Err(Error::Config("resume point lacks modulation weights".into()));
            }
            if !cfg.mode.uses_aid() && lora_params.is_none() {
                return Err(Error::Config("resume point lacks low-rank weights".into()));
            }
        }
        None => {
            aid_params = cfg
                .mode
                .uses_aid()
                .then(|| AidParams::init(model_cfg, model_cfg.seed))
                .transpose()?;
            lora_params = (!cfg.mode.uses_aid())
                .then(|| LoraParams::init(model_cfg, cfg.lora_rank, model_cfg.seed))
                .transpose()?;
            opt = match (&aid_params, &lora_params) {
                (Some(a), _) => AdamState::zeros(&a.params),
                (_, Some(l)) => AdamState::zeros(&l.params),
                _ => unreachable!(),
            };
            r = rng::seeded(cfg.seed);
            start_step = 0;
        }
    }

    let d = model_cfg.feature_dim;
    let m = model_cfg.image_len;
    let lambda_dpo = cfg.effective_lambda_dpo();
    let mut logs = Vec::new();

    for step in start_step..cfg.steps {
        let mut accum: Option<Vec<Vec<f32>>> = None;
        let mut diff_sum = 0.0;
        let mut dpo_sum = 0.0;
        let mut reg_sum = 0.0;
        let mut alpha_abs_sum = 0.0;
        let mut alpha_count = 0usize;
        let mut pref_hits = 0usize;
        let mut pref_total = 0usize;

        for _ in 0..cfg.grad_accum {
            let draw = step_randomness(
                &mut r,
                model_cfg.num_blocks,
                cfg.mode.uses_aid().then_some(cfg.skip_p),
                cfg.batch_size,
                pairs.len(),
                m * d,
            )?;

            let mut tape = Tape::<f32>::new();
            let backbone_ids = backbone.bind(&mut tape, false)?;
            let aid_id_list = match &aid_params {
                Some(a) => Some(a.params.bind(&mut tape, true)?),
                None => None,
            };
            let aid_ids = aid_id_list
                .as_ref()
                .map(|v| aid::assemble_aid_ids(model_cfg.num_blocks, &mut v.iter().copied()));
            let lora_id_list = match &lora_params {
                Some(l) => Some(l.params.bind(&mut tape, true)?),
                None => None,
            };
            let lora_ids = lora_id_list.as_ref().map(|v| {
                crate::lora::assemble_lora_ids(model_cfg.num_blocks, &mut v.iter().copied())
            });

            let mut diff_nodes = Vec::with_capacity(cfg.batch_size);
            let mut dpo_nodes = Vec::with_capacity(cfg.batch_size);
            let mut alpha_nodes: Vec<TensorId> = Vec::new();

            for (idx, t, noise) in &draw.picks {
                let pair = &pairs[*idx];
                let winner = FlowSample {
                    x: pair.winner_latent.clone(),
                    noise: noise.clone(),
                    t: *t,
                    tokens: pair.tokens.clone(),
                };
                let loser = FlowSample {
                    x: pair.loser_latent.clone(),
                    noise: noise.clone(),
                    t: *t,
                    tokens: pair.tokens.clone(),
                };

                let binding = || -> AidBinding<'_> {
                    match &aid_ids {
                        Some(ids) => AidBinding::Learned {
                            ids,
                            skip: draw.mask.as_deref(),
                        },
                        None => AidBinding::Off,
                    }
                };

                let z_pos = tape.constant(winner.interpolant(), [m, d])?;
                let target_pos = tape.constant(winner.target_velocity(), [m, d])?;
                let out_pos = model_forward(
                    &mut tape,
                    model_cfg,
                    &backbone_ids,
                    lora_ids.as_ref(),
                    z_pos,
                    winner.t,
                    &winner.tokens,
                    &binding(),
                    None,
                )?;
                diff_nodes.push(diffusion_loss(&mut tape, out_pos.velocity, target_pos)?);

                let z_neg = tape.constant(loser.interpolant(), [m, d])?;
                let target_neg = tape.constant(loser.target_velocity(), [m, d])?;
                let out_neg = model_forward(
                    &mut tape,
                    model_cfg,
                    &backbone_ids,
                    lora_ids.as_ref(),
                    z_neg,
                    loser.t,
                    &loser.tokens,
                    &binding(),
                    None,
                )?;

                for &(_, a) in out_pos.alphas.iter().chain(out_neg.alphas.iter()) {
                    alpha_nodes.push(a);
                    for &v in tape.data(a) {
                        alpha_abs_sum += (v as f64).abs();
                        alpha_count += 1;
                    }
                }

                let s_theta_pos = score_from_velocity(&mut tape, out_pos.velocity, target_pos)?;
                let s_theta_neg = score_from_velocity(&mut tape, out_neg.velocity, target_neg)?;
                pref_total += 1;
                if tape.data(s_theta_pos)[0] > tape.data(s_theta_neg)[0] {
                    pref_hits += 1;
                }

                if lambda_dpo > 0.0 {
                    // Frozen reference: the bare backbone, no modulation,
                    // no low-rank deltas. Nothing on this path carries
                    // gradients.
                    let ref_pos = model_forward(
                        &mut tape,
                        model_cfg,
                        &backbone_ids,
                        None,
                        z_pos,
                        winner.t,
                        &winner.tokens,
                        &AidBinding::Off,
                        None,
                    )?;
                    let ref_neg = model_forward(
                        &mut tape,
                        model_cfg,
                        &backbone_ids,
                        None,
                        z_neg,
                        loser.t,
                        &loser.tokens,
                        &AidBinding::Off,
                        None,
                    )?;
                    let s_ref_pos = score_from_velocity(&mut tape, ref_pos.velocity, target_pos)?;
                    let s_ref_neg = score_from_velocity(&mut tape, ref_neg.velocity, target_neg)?;
                    let s_ref_pos = tape.data(s_ref_pos)[0] as f64;
                    let s_ref_neg = tape.data(s_ref_neg)[0] as f64;
                    dpo_nodes.push(dpo_loss(
                        &mut tape,
                        s_theta_pos,
                        s_theta_neg,
                        s_ref_pos,
                        s_ref_neg,
                        cfg.beta,
                    )?);
                }
            }

            let diff_mean = mean_scalar_nodes(&mut tape, &diff_nodes)?;
            let mut total_node = diff_mean;
            let mut dpo_value = 0.0;
            if !dpo_nodes.is_empty() {
                let dpo_mean = mean_scalar_nodes(&mut tape, &dpo_nodes)?;
                dpo_value = tape.data(dpo_mean)[0] as f64;
                let weighted = tape.scale_const(dpo_mean, lambda_dpo)?;
                total_node = tape.add(total_node, weighted)?;
            }
            let mut reg_value = 0.0;
            if !alpha_nodes.is_empty() && cfg.lambda_reg > 0.0 {
                let reg = reg_loss(&mut tape, &alpha_nodes)?;
                reg_value = tape.data(reg)[0] as f64;
                let weighted = tape.scale_const(reg, cfg.lambda_reg)?;
                total_node = tape.add(total_node, weighted)?;
            }
            let diff_value = tape.data(diff_mean)[0] as f64;
            let total_value = tape.data(total_node)[0] as f64;
            if !total_value.is_finite() {
                return Err(Error::numeric(
                    format!("training step {step}"),
                    format!("loss diverged to {total_value}"),
                ));
            }
            diff_sum += diff_value;
            dpo_sum += dpo_value;
            reg_sum += reg_value;

            tape.backward(total_node)?;
            let grads = match (&aid_id_list, &lora_id_list, &aid_params, &lora_params) {
                (Some(ids), _, Some(p), _) => p.params.gather_grads(&tape, ids),
                (_, Some(ids), _, Some(p)) => p.params.gather_grads(&tape, ids),
                _ => unreachable!(),
            };
            match &mut accum {
                None => accum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.iter_mut().zip(g) {
                            *x += *y;
                        }
                    }
                }
            }
        }

        let mut grads = accum.expect("grad_accum >= 1");
        if cfg.grad_accum > 1 {
            let inv = 1.0 / cfg.grad_accum as f32;
            for g in grads.iter_mut() {
                for x in g.iter_mut() {
                    *x *= inv;
                }
            }
        }
        match (&mut aid_params, &mut lora_params) {
            (Some(a), _) => adam_step(&mut a.params, &grads, cfg.learning_rate, &cfg.adam, &mut opt)?,
            (_, Some(l)) => adam_step(&mut l.params, &grads, cfg.learning_rate, &cfg.adam, &mut opt)?,
            _ => unreachable!(),
        }

        let n = cfg.grad_accum as f64;
        let breakdown = total_loss(
            diff_sum / n,
            dpo_sum / n,
            reg_sum / n,
            lambda_dpo,
            cfg.lambda_reg,
            cfg.beta,
        );
        logs.push(StepLog {
            step,
            breakdown,
            mean_abs_alpha: if alpha_count == 0 {
                0.0
            } else {
                alpha_abs_sum / alpha_count as f64
            },
            preference_accuracy: pref_hits as f64 / pref_total.max(1) as f64,
        });
    }

    if backbone.params.content_hash() != hash_before {
        return Err(Error::Contract(
            "backbone parameters changed during modulation training".into(),
        ));
    }

    Ok(TrainRun {
        mode: cfg.mode,
        aid: aid_params,
        lora: lora_params,
        logs,
        state: TrainState {
            opt,
            rng_seed: cfg.seed,
            rng_word_pos: r.get_word_pos(),
        },
    })
}

// ── Evaluation helpers ──────────────────────────────────────────────

/// Flow-matching loss over a dataset with per-element (t, noise) fixed by
/// the seed; deterministic, usable as a before/after oracle.
pub fn validation_diffusion_loss(
    backbone: &Backbone<f32>,
    aid: Option<&AidParams<f32>>,
    lora: Option<&LoraParams<f32>>,
    data: &[(ToyPrompt, ToyGrid)],
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("validation needs a nonempty dataset".into()));
    }
    let cfg = &backbone.config;
    let (m, d) = (cfg.image_len, cfg.feature_dim);
    let mut acc = 0.0f64;
    for (i, (prompt, grid)) in data.iter().enumerate() {
        let mut r = rng::seeded(rng::derive(seed, 0xe7a1 ^ i as u64));
        let t = rng::uniform_f64(&mut r);
        let noise = rng::normal_vec::<f32>(&mut r, m * d);
        let s = FlowSample {
            x: toydata::encode::<f32>(grid, d)?,
            noise,
            t,
            tokens: prompt.tokens.clone(),
        };
        let mut tape = Tape::<f32>::new();
        let ids = backbone.bind(&mut tape, false)?;
        let aid_ids = match aid {
            Some(a) => Some(a.bind(&mut tape, false)?),
            None => None,
        };
        let lora_ids = match lora {
            Some(l) => Some(l.bind(&mut tape, false)?),
            None => None,
        };
        let z = tape.constant(s.interpolant(), [m, d])?;
        let target = tape.constant(s.target_velocity(), [m, d])?;
        let binding = match &aid_ids {
            Some(ids) => AidBinding::Learned { ids, skip: None },
            None => AidBinding::Off,
        };
        let out = model_forward(
            &mut tape,
            cfg,
            &ids,
            lora_ids.as_ref(),
            z,
            s.t,
            &s.tokens,
            &binding,
            None,
        )?;
        let l = diffusion_loss(&mut tape, out.velocity, target)?;
        acc += tape.data(l)[0] as f64;
    }
    Ok(acc / data.len() as f64)
}

/// Fraction of pairs the model implicitly prefers (winner scores above
/// loser) under per-pair (t, noise) fixed by the seed.
pub fn preference_accuracy(
    backbone: &Backbone<f32>,
    aid: Option<&AidParams<f32>>,
    lora: Option<&LoraParams<f32>>,
    pairs: &[PreferencePair],
    seed: u64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("preference evaluation needs pairs".into()));
    }
    let cfg = &backbone.config;
    let (m, d) = (cfg.image_len, cfg.feature_dim);
    let mut hits = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        let mut r = rng::seeded(rng::derive(seed, 0x9f0d ^ i as u64));
        let t = rng::uniform_f64(&mut r);
        let noise = rng::normal_vec::<f32>(&mut r, m * d);
        let score_of = |x: &[f32]| -> Result<f64> {
            let s = FlowSample {
                x: x.to_vec(),
                noise: noise.clone(),
                t,
                tokens: pair.tokens.clone(),
            };
            let mut tape = Tape::<f32>::new();
            let ids = backbone.bind(&mut tape, false)?;
            let aid_ids = match aid {
                Some(a) => Some(a.bind(&mut tape, false)?),
                None => None,
            };
            let lora_ids = match lora {
                Some(l) => Some(l.bind(&mut tape, false)?),
                None => None,
            };
            let z = tape.constant(s.interpolant(), [m, d])?;
            let target = tape.constant(s.target_velocity(), [m, d])?;
            let binding = match &aid_ids {
                Some(ids) => AidBinding::Learned { ids, skip: None },
                None => AidBinding::Off,
            };
            let out = model_forward(
                &mut tape,
                cfg,
                &ids,
                lora_ids.as_ref(),
                z,
                s.t,
                &s.tokens,
                &binding,
                None,
            )?;
            let sc = score_from_velocity(&mut tape, out.velocity, target)?;
            Ok(tape.data(sc)[0] as f64)
        };
        let s_pos = score_of(&pair.winner_latent)?;
        let s_neg = score_of(&pair.loser_latent)?;
        if s_pos > s_neg {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Mean adherence of decoded samples over prompts x seeds.
pub fn adherence_accuracy(
    source: &SampleSource<'_, f32>,
    prompts: &[ToyPrompt],
    sampler_cfg: &SamplerConfig,
    seeds: &[u64],
) -> Result<f64> {
    if prompts.is_empty() || seeds.is_empty() {
        return Err(Error::Contract("adherence evaluation needs prompts and seeds".into()));
    }
    let cfg = &source.backbone.config;
    let side = (cfg.image_len as f64).sqrt() as usize;
    if side * side != cfg.image_len {
        return Err(Error::Config(format!(
            "image_len {} is not a square grid",
            cfg.image_len
        )));
    }
    let mut acc = 0.0;
    for (pi, prompt) in prompts.iter().enumerate() {
        for &s in seeds {
            let mut sc = sampler_cfg.clone();
            sc.seed = rng::derive(s, pi as u64);
            sc.capture_alpha = false;
            sc.capture_attention_norm = false;
            let traj = sample(source, &prompt.tokens, &sc, "eval")?;
            let grid = toydata::decode(traj.final_latent(), cfg.feature_dim, side)?;
            acc += toydata::adherence(prompt, &grid).accuracy;
        }
    }
    Ok(acc / (prompts.len() * seeds.len()) as f64)
}

// ── Per-step CSV log ────────────────────────────────────────────────

pub const TRAIN_LOG_MAGIC: &str = "# aid-train-log v1";

pub fn render_train_log(logs: &[StepLog]) -> String {
    let mut out = String::new();
    out.push_str(TRAIN_LOG_MAGIC);
    out.push('\n');
    out.push_str("step,diff,dpo,reg,total,mean_abs_alpha,preference_accuracy\n");
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            l.step,
            l.breakdown.diff,
            l.breakdown.dpo,
            l.breakdown.reg,
            l.breakdown.total,
            l.mean_abs_alpha,
            l.preference_accuracy
        ));
    }
    out
}

pub fn parse_train_log(text: &str) -> Result<Vec<StepLog>> {
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != TRAIN_LOG_MAGIC {
        return Err(Error::Contract(format!("bad train log magic: {magic}")));
    }
    let _header = lines.next();
    let mut out = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Contract(format!("bad train log row: {line}")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Contract(format!("bad number {s} in train log")))
        };
        out.push(StepLog {
            step: f[0]
                .parse()
                .map_err(|_| Error::Contract(format!("bad step {}", f[0])))?,
            breakdown: LossBreakdown {
                diff: num(f[1])?,
                dpo: num(f[2])?,
                reg: num(f[3])?,
                total: num(f[4])?,
                lambda_dpo: f64::NAN,
                lambda_reg: f64::NAN,
                beta: f64::NAN,
            },
            mean_abs_alpha: num(f[5])?,
            preference_accuracy: num(f[6])?,
        });
    }
    Ok(out)
}
