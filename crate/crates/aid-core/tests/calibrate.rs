// Scratch calibration harness (temporary).

use aid_core::config::AppConfig;
use aid_core::sampler::{AidMode, SampleSource, SamplerConfig};
use aid_core::toydata;
use aid_core::trainer::{self, PretrainConfig, TrainConfig};

fn envf(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

#[test]
#[ignore]
fn calibrate() {
    let mut cfg = AppConfig::default();
    cfg.pretrain = PretrainConfig {
        steps: envf("P_STEPS", 600.0) as u64,
        batch_size: envf("P_BATCH", 8.0) as usize,
        learning_rate: envf("P_LR", 2e-3),
        cond_dropout: envf("P_DROP", 0.1),
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let data = toydata::generate_dataset(cfg.data.size, cfg.data.seed, &cfg.model, cfg.data.grid_side).unwrap();
    let val = toydata::generate_dataset(128, 777, &cfg.model, cfg.data.grid_side).unwrap();
    let pairs = toydata::make_preference_pairs(&data, cfg.data.seed, &cfg.model).unwrap();
    let val_pairs = toydata::make_preference_pairs(&val, 778, &cfg.model).unwrap();

    let (backbone, report) = trainer::pretrain_backbone(&cfg.model, &data, &val, &cfg.pretrain).unwrap();
    eprintln!("[{:?}] pretrain val {} -> {}", t0.elapsed(), report.init_val_loss, report.final_val_loss);

    let base_pref = trainer::preference_accuracy(&backbone, None, None, &val_pairs, 42).unwrap();
    eprintln!("[{:?}] step-0 preference accuracy {base_pref}", t0.elapsed());

    let prompts = toydata::eval_prompts(48, &cfg.model).unwrap();
    for scale in [1.0, 1.5, 3.0, 5.0] {
        let sc = SamplerConfig { num_steps: 28, cfg_scale: scale, ..Default::default() };
        let base_adh = trainer::adherence_accuracy(&SampleSource::bare(&backbone), &prompts, &sc, &[1]).unwrap();
        eprintln!("[{:?}] base adherence @cfg={scale}: {base_adh}", t0.elapsed());
    }

    // Inspect a few decoded level rows vs targets.
    let sc = SamplerConfig { num_steps: 28, cfg_scale: envf("CFG", 3.0), ..Default::default() };
    for p in prompts.iter().take(3) {
        let traj = aid_core::sampler::sample(&SampleSource::bare(&backbone), &p.tokens, &sc, "dbg").unwrap();
        let levels = toydata::decode_levels(traj.final_latent(), cfg.model.feature_dim, 16);
        let want: Vec<f64> = (0..16)
            .map(|i| {
                let code = if i < p.count as usize { 1 + p.color } else { 0 };
                toydata::code_level(code)
            })
            .collect();
        let err: Vec<String> = levels.iter().zip(&want).map(|(l, w)| format!("{:+.2}", l - w)).collect();
        eprintln!("prompt c{} n{}: level errs {}", p.color, p.count, err.join(" "));
    }

    if envf("SKIP_AID", 0.0) > 0.5 {
        return;
    }

    let tc = TrainConfig {
        steps: envf("A_STEPS", 400.0) as u64,
        learning_rate: envf("A_LR", 2e-3),
        lambda_reg: envf("A_REG", 0.1),
        lambda_dpo: envf("A_DPO", 1.0),
        batch_size: envf("A_BATCH", 8.0) as usize,
        ..Default::default()
    };
    let run = trainer::train_aid(&backbone, &pairs, &tc, None).unwrap();
    let aid = run.aid.unwrap();
    eprintln!("[{:?}] trained: final log {:?}", t0.elapsed(), run.logs.last().unwrap());

    let aid_pref = trainer::preference_accuracy(&backbone, Some(&aid), None, &val_pairs, 42).unwrap();
    eprintln!("[{:?}] trained preference accuracy {aid_pref} (delta {})", t0.elapsed(), aid_pref - base_pref);

    let src = SampleSource { backbone: &backbone, aid: Some(&aid), lora: None, sparse: None };
    let sc_aid = SamplerConfig { aid_mode: AidMode::Learned, ..sc.clone() };
    let aid_adh = trainer::adherence_accuracy(&src, &prompts, &sc_aid, &[1]).unwrap();
    let base_adh = trainer::adherence_accuracy(&SampleSource::bare(&backbone), &prompts, &sc, &[1]).unwrap();
    eprintln!("[{:?}] adherence base {base_adh} aid {aid_adh} (delta {})", t0.elapsed(), aid_adh - base_adh);
}

#[test]
#[ignore]
fn curve() {
    let cfg = AppConfig::default();
    let mut pc = cfg.pretrain.clone();
    pc.steps = envf("P_STEPS", 4000.0) as u64;
    pc.cond_dropout = envf("P_DROP", 0.1);
    let data = toydata::generate_dataset(cfg.data.size, cfg.data.seed, &cfg.model, cfg.data.grid_side).unwrap();
    let val = toydata::generate_dataset(256, 777, &cfg.model, cfg.data.grid_side).unwrap();
    let pairs = toydata::make_preference_pairs(&data, cfg.data.seed, &cfg.model).unwrap();
    let val_pairs = toydata::make_preference_pairs(&val, 778, &cfg.model).unwrap();
    let (backbone, _) = trainer::pretrain_backbone(&cfg.model, &data, &val, &pc).unwrap();
    let base = trainer::preference_accuracy(&backbone, None, None, &val_pairs, 42).unwrap();
    eprintln!("base pref (256 pairs): {base}");
    let tc = TrainConfig {
        steps: envf("A_STEPS", 600.0) as u64,
        learning_rate: envf("A_LR", 2e-3),
        ..Default::default()
    };
    let run = trainer::train_aid(&backbone, &pairs, &tc, None).unwrap();
    for log in run.logs.iter().step_by(50) {
        eprintln!(
            "step {:4}: diff {:.4} dpo {:.4} reg {:.4} |a| {:.4} pref(batch) {:.2}",
            log.step, log.breakdown.diff, log.breakdown.dpo, log.breakdown.reg,
            log.mean_abs_alpha, log.preference_accuracy
        );
    }
    let aid = run.aid.unwrap();
    let trained = trainer::preference_accuracy(&backbone, Some(&aid), None, &val_pairs, 42).unwrap();
    eprintln!("trained pref (256 pairs): {trained} (delta {})", trained - base);
}

fn pref_at_band(
    backbone: &aid_core::model::Backbone<f32>,
    aid: Option<&aid_core::aid::AidParams<f32>>,
    pairs: &[aid_core::objectives::PreferencePair],
    t_lo: f64,
    t_hi: f64,
    seed: u64,
) -> f64 {
    pref_at_band_draws(backbone, aid, pairs, t_lo, t_hi, seed, envf("DRAWS", 1.0) as usize)
}

fn pref_at_band_draws(
    backbone: &aid_core::model::Backbone<f32>,
    aid: Option<&aid_core::aid::AidParams<f32>>,
    pairs: &[aid_core::objectives::PreferencePair],
    t_lo: f64,
    t_hi: f64,
    seed: u64,
    draws: usize,
) -> f64 {
    use aid_core::model::{model_forward, AidBinding};
    use aid_core::objectives::{score_from_velocity, FlowSample};
    use aid_core::tensor::Tape;
    let cfg = &backbone.config;
    let (m, d) = (cfg.image_len, cfg.feature_dim);
    let mut hits = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        let mut r = aid_core::rng::seeded(aid_core::rng::derive(seed, i as u64));
        let mut sp = 0.0;
        let mut sn = 0.0;
        for _ in 0..draws {
            let t = t_lo + (t_hi - t_lo) * aid_core::rng::uniform_f64(&mut r);
            let noise = aid_core::rng::normal_vec::<f32>(&mut r, m * d);
            let score = |x: &[f32]| -> f64 {
                let s = FlowSample { x: x.to_vec(), noise: noise.clone(), t, tokens: pair.tokens.clone() };
                let mut tape = Tape::<f32>::new();
                let ids = backbone.bind(&mut tape, false).unwrap();
                let aid_ids = aid.map(|a| a.bind(&mut tape, false).unwrap());
                let z = tape.constant(s.interpolant(), [m, d]).unwrap();
                let target = tape.constant(s.target_velocity(), [m, d]).unwrap();
                let binding = match &aid_ids {
                    Some(ids) => AidBinding::Learned { ids, skip: None },
                    None => AidBinding::Off,
                };
                let out = model_forward(&mut tape, cfg, &ids, None, z, s.t, &s.tokens, &binding, None).unwrap();
                let sc = score_from_velocity(&mut tape, out.velocity, target).unwrap();
                tape.data(sc)[0] as f64
            };
            sp += score(&pair.winner_latent);
            sn += score(&pair.loser_latent);
        }
        if sp > sn {
            hits += 1;
        }
    }
    hits as f64 / pairs.len() as f64
}

#[test]
#[ignore]
fn bands() {
    let cfg = AppConfig::default();
    let mut pc = cfg.pretrain.clone();
    pc.steps = envf("P_STEPS", 4000.0) as u64;
    let data = toydata::generate_dataset(cfg.data.size, cfg.data.seed, &cfg.model, cfg.data.grid_side).unwrap();
    let val = toydata::generate_dataset(256, 777, &cfg.model, cfg.data.grid_side).unwrap();
    let pairs = toydata::make_preference_pairs(&data, cfg.data.seed, &cfg.model).unwrap();
    let val_pairs = toydata::make_preference_pairs(&val, 778, &cfg.model).unwrap();
    let (backbone, _) = trainer::pretrain_backbone(&cfg.model, &data, &val, &pc).unwrap();
    let tc = TrainConfig {
        steps: envf("A_STEPS", 600.0) as u64,
        learning_rate: envf("A_LR", 2e-3),
        lambda_dpo: envf("A_DPO", 1.0),
        lambda_reg: envf("A_REG", 0.1),
        batch_size: envf("A_BATCH", 8.0) as usize,
        ..Default::default()
    };
    let run = trainer::train_aid(&backbone, &pairs, &tc, None).unwrap();
    eprintln!("final: {:?}", run.logs.last().unwrap());
    let aid = run.aid.unwrap();
    for (lo, hi) in [(0.0, 1.0), (0.0, 0.3), (0.3, 0.6), (0.6, 0.9), (0.8, 1.0), (0.6, 1.0)] {
        let b = pref_at_band(&backbone, None, &val_pairs, lo, hi, 42);
        let a = pref_at_band(&backbone, Some(&aid), &val_pairs, lo, hi, 42);
        eprintln!("t in [{lo},{hi}]: base {b:.4} aid {a:.4} delta {:+.4}", a - b);
    }
}

fn constant_aid(cfg: &aid_core::model::ModelConfig, a: f64) -> aid_core::aid::AidParams<f32> {
    let mut aid = aid_core::aid::AidParams::<f32>::init(cfg, 0).unwrap();
    for i in 0..aid.params.len() {
        let p = aid.params.get_mut(i);
        let name = p.name.clone();
        p.data.fill(0.0);
        if name.ends_with("gate.b2") {
            p.data[0] = 40.0;
        }
        if name.ends_with("feat.b2") {
            p.data[0] = (a.clamp(-0.999, 0.999) as f32).atanh();
        }
    }
    aid
}

#[test]
#[ignore]
fn leverage() {
    let cfg = AppConfig::default();
    let mut pc = cfg.pretrain.clone();
    pc.steps = envf("P_STEPS", 4000.0) as u64;
    pc.cond_dropout = envf("P_DROP", 0.1);
    let data = toydata::generate_dataset(cfg.data.size, cfg.data.seed, &cfg.model, cfg.data.grid_side).unwrap();
    let val = toydata::generate_dataset(256, 777, &cfg.model, cfg.data.grid_side).unwrap();
    let val_pairs = toydata::make_preference_pairs(&val, 778, &cfg.model).unwrap();
    let (backbone, _) = trainer::pretrain_backbone(&cfg.model, &data, &val, &pc).unwrap();
    let prompts = toydata::eval_prompts(48, &cfg.model).unwrap();
    for a in [-0.5, -0.25, 0.0, 0.25, 0.5, 0.8] {
        let aid = constant_aid(&cfg.model, a);
        let vloss = trainer::validation_diffusion_loss(&backbone, Some(&aid), None, &val, 42).unwrap();
        let pref = pref_at_band(&backbone, Some(&aid), &val_pairs, 0.0, 1.0, 42);
        let src = SampleSource { backbone: &backbone, aid: Some(&aid), lora: None, sparse: None };
        let sc = SamplerConfig { num_steps: 28, cfg_scale: envf("CFG", 1.5), aid_mode: AidMode::Learned, ..Default::default() };
        let adh = trainer::adherence_accuracy(&src, &prompts, &sc, &[1]).unwrap();
        eprintln!("alpha {a:+.2}: val_loss {vloss:.4} pref {pref:.4} adherence {adh:.4}");
    }
}
