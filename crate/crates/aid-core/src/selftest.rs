//! Fast smoke gate over the crate's core invariants; the `selftest` CLI
//! command runs this and must finish well under a minute.

use std::time::Instant;

use crate::aid::{self, AidParams};
use crate::analytics::{self, AlphaRecord, Axis};
use crate::checkpoint::{self, Checkpoint, CheckpointKind, DIVERGENCE_NOTES};
use crate::config::{self, AppConfig};
use crate::error::Result;
use crate::gradcheck;
use crate::model::{Backbone, ModelConfig, TokenSequence};
use crate::objectives::dpo_loss_value;
use crate::rng;
use crate::sampler::{integrate, sample, SampleSource, SamplerConfig};
use crate::tensor::Tape;
use crate::toydata;
use crate::trace;

pub struct CheckResult {
    pub name: &'static str,
    pub outcome: Result<()>,
    pub millis: u128,
}

pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.outcome.is_ok())
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            match &c.outcome {
                Ok(()) => out.push_str(&format!("ok    {:<36} {} ms\n", c.name, c.millis)),
                Err(e) => out.push_str(&format!("FAIL  {:<36} {e}\n", c.name)),
            }
        }
        let failures = self.checks.iter().filter(|c| c.outcome.is_err()).count();
        out.push_str(&format!(
            "selftest: {} ({} checks, {failures} failures)\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.checks.len()
        ));
        out
    }
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        num_blocks: 2,
        feature_dim: 8,
        num_heads: 2,
        text_len: 4,
        image_len: 4,
        vocab_size: 16,
        aid_hidden_dim: 4,
        seed: 1,
    }
}

fn ensure(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(crate::Error::Contract(msg.to_string()))
    }
}

fn check_gradients() -> Result<()> {
    let report = gradcheck::full_model_check::<f64>(&small_cfg(), 5, 1e-6, 1e-5)?;
    ensure(
        report.passed(),
        &format!("full-model gradcheck failed:\n{}", report.render_text()),
    )
}

fn check_alpha_bounds() -> Result<()> {
    let cfg = small_cfg();
    let mut r = rng::seeded(77);
    for trial in 0..40u64 {
        let mut aid = AidParams::<f32>::init(&cfg, trial)?;
        for i in 0..aid.params.len() {
            for x in aid.params.get_mut(i).data.iter_mut() {
                *x += (rng::normal_f64(&mut r) * 0.3) as f32;
            }
        }
        let c0: Vec<f32> = (0..cfg.text_len * cfg.feature_dim)
            .map(|_| (rng::normal_f64(&mut r) * 1.5) as f32)
            .collect();
        let t = rng::uniform_f64(&mut r);
        for l in 0..cfg.num_blocks {
            let a = aid::compute_alpha_values(&aid, l, &c0, cfg.text_len, t)?;
            for &v in &a.values {
                ensure(v > -1.0 && v < 1.0, &format!("alpha {v} out of (-1,1)"))?;
            }
        }
    }
    Ok(())
}

fn check_zero_init_identity() -> Result<()> {
    let cfg = small_cfg();
    let backbone = Backbone::<f32>::init(cfg.clone())?;
    let aid = AidParams::<f32>::init(&cfg, 9)?;
    let tokens = TokenSequence::new(vec![3, 9, 0, 0]);
    for seed in [1u64, 2] {
        let off_cfg = SamplerConfig {
            num_steps: 4,
            cfg_scale: 2.0,
            seed,
            ..Default::default()
        };
        let on_cfg = SamplerConfig {
            aid_mode: crate::sampler::AidMode::Learned,
            ..off_cfg.clone()
        };
        let off = sample(&SampleSource::bare(&backbone), &tokens, &off_cfg, "s")?;
        let src = SampleSource {
            backbone: &backbone,
            aid: Some(&aid),
            lora: None,
            sparse: None,
        };
        let on = sample(&src, &tokens, &on_cfg, "s")?;
        for ((_, a), (_, b)) in off.states.iter().zip(&on.states) {
            let ab: Vec<u32> = a.iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u32> = b.iter().map(|x| x.to_bits()).collect();
            ensure(ab == bb, "zero-init modulation altered a trajectory")?;
        }
    }
    Ok(())
}

fn check_skip_mask() -> Result<()> {
    let mut r = rng::seeded(4);
    ensure(
        aid::skip_mask(8, 0.0, &mut r)?.iter().all(|&b| !b),
        "p=0 mask not all false",
    )?;
    ensure(
        aid::skip_mask(8, 1.0, &mut r)?.iter().all(|&b| b),
        "p=1 mask not all true",
    )?;
    Ok(())
}

fn check_loss_oracles() -> Result<()> {
    let ln2 = dpo_loss_value(1.0, 0.0, 1.5, 0.5, 0.1);
    ensure((ln2 - std::f64::consts::LN_2).abs() < 1e-9, "dpo ln2 oracle")?;
    let v = dpo_loss_value(10.0, 0.0, 0.0, 0.0, 0.1);
    ensure((v - 0.313_261_687_518_222_8).abs() < 1e-9, "dpo 0.3133 oracle")?;

    let mut tape = Tape::<f64>::new();
    let a = tape.constant(vec![0.3, 0.4], [2, 1])?;
    let l = crate::objectives::reg_loss(&mut tape, &[a])?;
    ensure((tape.data(l)[0] - 0.5).abs() < 1e-9, "reg 0.5 oracle")?;

    let x = tape.constant(vec![1.0, 2.0], [1, 2])?;
    let l = crate::objectives::diffusion_loss(&mut tape, x, x)?;
    ensure(tape.data(l)[0] == 0.0, "diffusion perfect-prediction oracle")?;
    Ok(())
}

fn check_sampler_exactness() -> Result<()> {
    let mut r = rng::seeded(6);
    let x = rng::normal_vec::<f64>(&mut r, 16);
    let eps = rng::normal_vec::<f64>(&mut r, 16);
    let v: Vec<f64> = eps.iter().zip(&x).map(|(e, xx)| e - xx).collect();
    for steps in [1usize, 6, 28] {
        let states = integrate(eps.clone(), steps, |_z, _t, _k| Ok(v.clone()))?;
        let endpoint = &states.last().unwrap().1;
        for (a, b) in endpoint.iter().zip(&x) {
            ensure(
                (a - b).abs() < 1e-12,
                &format!("Euler endpoint error {} at T={steps}", (a - b).abs()),
            )?;
        }
    }
    Ok(())
}

fn check_codec() -> Result<()> {
    let cfg = ModelConfig::default();
    let data = toydata::generate_dataset(8, 1, &cfg, 4)?;
    for (_, grid) in &data {
        let latent = toydata::encode::<f32>(grid, cfg.feature_dim)?;
        let back = toydata::decode(&latent, cfg.feature_dim, 4)?;
        ensure(&back == grid, "codec round trip")?;
    }
    Ok(())
}

fn check_checkpoint_roundtrip() -> Result<()> {
    let dir = std::env::temp_dir().join(format!("aid-selftest-ckpt-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    let mut cfg = AppConfig::default();
    cfg.model = small_cfg();
    cfg.data.grid_side = 2;
    let backbone = Backbone::<f32>::init(cfg.model.clone())?;
    let ckpt = Checkpoint {
        kind: CheckpointKind::Backbone,
        config: cfg,
        step: 0,
        divergences: DIVERGENCE_NOTES.to_string(),
        backbone: backbone.params.clone(),
        aid: None,
        lora: None,
        state: None,
    };
    checkpoint::save(&ckpt, &dir)?;
    let b1 = checkpoint::raw_bytes(&dir)?;
    let loaded = checkpoint::load(&dir)?;
    let dir2 = dir.with_extension("again");
    checkpoint::save(&loaded, &dir2)?;
    let b2 = checkpoint::raw_bytes(&dir2)?;
    let _ = std::fs::remove_dir_all(&dir);
    let _ = std::fs::remove_dir_all(&dir2);
    ensure(b1 == b2, "checkpoint round trip not bitwise")
}

fn check_config_roundtrip() -> Result<()> {
    let cfg = AppConfig::default();
    let text = config::serialize(&cfg);
    let again = config::parse(&text)?;
    ensure(cfg == again, "config round trip not equal")?;
    ensure(
        config::parse("[train]\nskip_p = 2.0\n").is_err(),
        "out-of-range config accepted",
    )
}

fn check_trace_roundtrip() -> Result<()> {
    let path = std::env::temp_dir().join(format!("aid-selftest-trace-{}", std::process::id()));
    let records: Vec<AlphaRecord> = (0..10)
        .map(|i| AlphaRecord {
            run: "self".into(),
            block: i % 2,
            t: 1.0 - i as f64 * 0.1,
            token: i % 3,
            value: (i as f32).sin() * 0.5,
        })
        .collect();
    trace::write_alpha_trace(&path, "self", &records)?;
    let back = trace::read_alpha_trace(&path)?;
    let _ = std::fs::remove_file(&path);
    ensure(records == back, "alpha trace round trip")?;

    let rows = analytics::distribution_by(&records, Axis::Block);
    ensure(rows.len() == 2, "distribution bucket count")?;
    let table = analytics::block_timestep_heatmap(&records);
    let parsed = trace::parse_heatmap_csv(&trace::render_heatmap_csv(&table))?;
    ensure(parsed == table, "heatmap csv round trip")
}

pub fn run() -> SelftestReport {
    let checks: Vec<(&'static str, fn() -> Result<()>)> = vec![
        ("gradients_full_model_f64", check_gradients),
        ("alpha_strictly_bounded", check_alpha_bounds),
        ("zero_init_identity_sampling", check_zero_init_identity),
        ("skip_mask_endpoints", check_skip_mask),
        ("loss_closed_form_oracles", check_loss_oracles),
        ("euler_oracle_exactness", check_sampler_exactness),
        ("grid_codec_roundtrip", check_codec),
        ("checkpoint_bitwise_roundtrip", check_checkpoint_roundtrip),
        ("config_parse_roundtrip", check_config_roundtrip),
        ("trace_and_csv_roundtrip", check_trace_roundtrip),
    ];
    let mut results = Vec::with_capacity(checks.len());
    for (name, f) in checks {
        let start = Instant::now();
        let outcome = f();
        results.push(CheckResult {
            name,
            outcome,
            millis: start.elapsed().as_millis(),
        });
    }
    SelftestReport { checks: results }
}
