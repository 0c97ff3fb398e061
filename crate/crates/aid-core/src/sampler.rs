//! Rectified-flow sampling: Euler integration of the learned velocity
//! field over a uniform time grid from t = 1 to t = 0, with static
//! classifier-free guidance and optional modulation, capturing coefficient
//! and attention-norm traces along the way.

use crate::aid::AidParams;
use crate::analytics::AlphaRecord;
use crate::error::{Error, Result};
use crate::lora::LoraParams;
use crate::model::{
    model_forward, AidBinding, AttentionNormSample, Backbone, ForwardProbe, TokenSequence,
};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tape;
use crate::toydata::{self, ToyGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AidMode {
    Off,
    Learned,
    SparseEnhanced,
}

impl AidMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AidMode::Off => "off",
            AidMode::Learned => "learned",
            AidMode::SparseEnhanced => "sparse_enhanced",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(AidMode::Off),
            "learned" => Ok(AidMode::Learned),
            "sparse_enhanced" => Ok(AidMode::SparseEnhanced),
            other => Err(Error::Config(format!(
                "aid_mode must be off|learned|sparse_enhanced, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    pub capture_alpha: bool,
    pub capture_attention_norm: bool,
    pub aid_mode: AidMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_steps: 28,
            cfg_scale: 3.0,
            seed: 0,
            capture_alpha: false,
            capture_attention_norm: false,
            aid_mode: AidMode::Off,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("sampler.num_steps must be >= 1".into()));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::Config(format!(
                "sampler.cfg_scale must be >= 0, got {}",
                self.cfg_scale
            )));
        }
        Ok(())
    }
}

/// The (t, z) states from t = 1 down to t = 0, plus attached traces.
#[derive(Debug, Clone)]
pub struct Trajectory<S> {
    pub states: Vec<(f64, Vec<S>)>,
    pub alphas: Vec<AlphaRecord>,
    pub attention_norms: Vec<AttentionNormSample>,
}

impl<S: Scalar> Trajectory<S> {
    pub fn final_latent(&self) -> &[S] {
        &self.states.last().expect("nonempty trajectory").1
    }
}

/// Static guidance: `v_uncond + s (v_cond - v_uncond)`. The endpoints
/// s = 1 and s = 0 return the respective branch exactly.
pub fn cfg_velocity<S: Scalar>(v_cond: &[S], v_uncond: &[S], s: f64) -> Vec<S> {
    if s == 1.0 {
        return v_cond.to_vec();
    }
    if s == 0.0 {
        return v_uncond.to_vec();
    }
    let sv = S::from_f64(s);
    v_cond
        .iter()
        .zip(v_uncond)
        .map(|(&c, &u)| u + sv * (c - u))
        .collect()
}

/// Euler integration of an arbitrary velocity field over the uniform grid
/// t_k = (T - k) / T. Returns T + 1 states, t strictly decreasing.
pub fn integrate<S: Scalar, F>(
    z_init: Vec<S>,
    num_steps: usize,
    mut field: F,
) -> Result<Vec<(f64, Vec<S>)>>
where
    F: FnMut(&[S], f64, usize) -> Result<Vec<S>>,
{
    if num_steps == 0 {
        return Err(Error::Config("num_steps must be >= 1".into()));
    }
    let t_of = |k: usize| (num_steps - k) as f64 / num_steps as f64;
    let mut states = Vec::with_capacity(num_steps + 1);
    let mut z = z_init;
    states.push((t_of(0), z.clone()));
    for k in 0..num_steps {
        let t = t_of(k);
        let v = field(&z, t, k)?;
        if v.iter().any(|x| x.is_nan()) {
            return Err(Error::numeric(
                format!("sampler step {k}"),
                "NaN velocity",
            ));
        }
        let dt = S::from_f64(t - t_of(k + 1));
        for (zi, &vi) in z.iter_mut().zip(&v) {
            *zi = *zi - dt * vi;
        }
        if z.iter().any(|x| x.is_nan()) {
            return Err(Error::numeric(format!("sampler step {k}"), "NaN latent"));
        }
        states.push((t_of(k + 1), z.clone()));
    }
    Ok(states)
}

/// Everything a sampling run reads from: frozen weights plus the optional
/// modulation stacks.
pub struct SampleSource<'a, S> {
    pub backbone: &'a Backbone<S>,
    pub aid: Option<&'a AidParams<S>>,
    pub lora: Option<&'a LoraParams<S>>,
    /// Constant per-block stack for `AidMode::SparseEnhanced`.
    pub sparse: Option<&'a [f64]>,
}

impl<'a, S: Scalar> SampleSource<'a, S> {
    pub fn bare(backbone: &'a Backbone<S>) -> Self {
        SampleSource {
            backbone,
            aid: None,
            lora: None,
            sparse: None,
        }
    }
}

/// Draw z at t = 1 from a seeded standard normal and run Euler steps of
/// the guided velocity down to t = 0. Traces are captured only from the
/// conditional branch.
pub fn sample<S: Scalar>(
    source: &SampleSource<'_, S>,
    tokens: &TokenSequence,
    config: &SamplerConfig,
    run_id: &str,
) -> Result<Trajectory<S>> {
    config.validate()?;
    let cfg = &source.backbone.config;
    match config.aid_mode {
        AidMode::Learned if source.aid.is_none() => {
            return Err(Error::Config(
                "aid_mode=learned requires modulation weights in the checkpoint".into(),
            ));
        }
        AidMode::SparseEnhanced if source.sparse.is_none() => {
            return Err(Error::Config(
                "aid_mode=sparse_enhanced requires a constant block stack".into(),
            ));
        }
        _ => {}
    }

    let mut r = rng::seeded(config.seed);
    let z0 = rng::normal_vec::<S>(&mut r, cfg.image_len * cfg.feature_dim);
    let null = toydata::null_tokens(cfg.text_len);

    let mut alphas: Vec<AlphaRecord> = Vec::new();
    let mut attention_norms: Vec<AttentionNormSample> = Vec::new();

    let states = integrate(z0, config.num_steps, |z, t, _k| {
        let eval = |toks: &TokenSequence,
                    modulated: bool,
                    alphas: Option<&mut Vec<AlphaRecord>>,
                    norms: Option<&mut Vec<AttentionNormSample>>|
         -> Result<Vec<S>> {
            let mut tape = Tape::new();
            let ids = source.backbone.bind(&mut tape, false)?;
            let lora_ids = match source.lora {
                Some(lo) => Some(lo.bind(&mut tape, false)?),
                None => None,
            };
            let aid_ids = match (config.aid_mode, source.aid, modulated) {
                (AidMode::Learned, Some(a), true) => Some(a.bind(&mut tape, false)?),
                _ => None,
            };
            let binding = match (config.aid_mode, modulated) {
                (AidMode::Off, _) | (_, false) => AidBinding::Off,
                (AidMode::Learned, true) => AidBinding::Learned {
                    ids: aid_ids.as_ref().expect("checked above"),
                    skip: None,
                },
                (AidMode::SparseEnhanced, true) => AidBinding::Constant {
                    alpha: source.sparse.expect("checked above"),
                },
            };
            let zt = tape.constant(z.to_vec(), [cfg.image_len, cfg.feature_dim])?;
            let mut probe = ForwardProbe {
                capture_attention_norm: norms.is_some(),
                ..Default::default()
            };
            let out = model_forward(
                &mut tape,
                cfg,
                &ids,
                lora_ids.as_ref(),
                zt,
                t,
                toks,
                &binding,
                norms.is_some().then_some(&mut probe),
            )?;
            if let Some(sink) = alphas {
                for &(block, id) in &out.alphas {
                    for (token, &v) in tape.data(id).iter().enumerate() {
                        sink.push(AlphaRecord {
                            run: run_id.to_string(),
                            block,
                            t,
                            token,
                            value: v.to_f64() as f32,
                        });
                    }
                }
            }
            if let Some(sink) = norms {
                sink.extend(probe.attention_norms);
            }
            Ok(tape.data(out.velocity).to_vec())
        };

        let v_cond = eval(
            tokens,
            true,
            config.capture_alpha.then_some(&mut alphas),
            config.capture_attention_norm.then_some(&mut attention_norms),
        )?;
        if config.cfg_scale == 1.0 {
            return Ok(v_cond);
        }
        // The null branch models "no text": modulation stays off there.
        let v_uncond = eval(&null, false, None, None)?;
        Ok(cfg_velocity(&v_cond, &v_uncond, config.cfg_scale))
    })?;

    Ok(Trajectory {
        states,
        alphas,
        attention_norms,
    })
}

/// Decode the final latent through the fixed grid codec.
pub fn decode<S: Scalar>(backbone_cfg_image_side: usize, latent: &[S], feature_dim: usize) -> Result<ToyGrid> {
    toydata::decode(latent, feature_dim, backbone_cfg_image_side)
}
