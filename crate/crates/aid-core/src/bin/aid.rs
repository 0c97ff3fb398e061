//! Command-line surface: thin adapters over the library modules. Every
//! run writes a manifest recording the effective configuration, seeds,
//! build id, and wall time. Exit codes: 0 success, 1 contract error,
//! 2 numeric error.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use aid_core::analytics::{self, Axis};
use aid_core::checkpoint::{
    self, Checkpoint, CheckpointKind, SavedTrainState, DIVERGENCE_NOTES,
};
use aid_core::config::{self, AppConfig};
use aid_core::error::{Error, Result};
use aid_core::gradcheck;
use aid_core::model::ModelConfig;
use aid_core::params::ParamSet;
use aid_core::sampler::{sample, AidMode, SampleSource};
use aid_core::toydata;
use aid_core::trace;
use aid_core::trainer::{self, ResumePoint};
use aid_core::{rng, selftest};

const GIT_DESCRIBE: &str = env!("GIT_DESCRIBE");

#[derive(Parser)]
#[command(name = "aid", version, about = "Toy rectified-flow transformer with gated per-token text modulation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the toy backbone on the flow-matching objective.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the checkpoint, logs and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Override a configuration key, e.g. --set pretrain.steps=100.
        #[arg(long)]
        set: Vec<String>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the modulation stack (or low-rank deltas) over a frozen backbone.
    TrainAid {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Backbone checkpoint directory.
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        set: Vec<String>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        skip_p: Option<f64>,
        #[arg(long)]
        lambda_reg: Option<f64>,
        #[arg(long)]
        lambda_dpo: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint written by a previous train-aid run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Integrate the velocity field from noise and decode the result.
    Sample {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory (backbone, or one holding trained stacks).
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        set: Vec<String>,
        #[arg(long)]
        aid_mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        capture_alpha: bool,
        #[arg(long)]
        capture_attn: bool,
        /// Prompt attributes, e.g. "color=2,count=3"; seeded draw if absent.
        #[arg(long)]
        prompt: Option<String>,
        /// Comma-separated block indices for sparse enhancement.
        #[arg(long)]
        enhance_blocks: Option<String>,
        #[arg(long, default_value_t = 0.5)]
        enhance_value: f64,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Aggregate captured traces into CSV tables.
    Analyze {
        /// Directory containing alpha.trace / attn.trace.
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also emit the top-k enhancement block selection.
        #[arg(long)]
        select_k: Option<usize>,
    },
    /// Verify tape gradients against central finite differences.
    Gradcheck {
        /// "high" (f64) or "standard" (f32).
        #[arg(long, default_value = "high")]
        precision: String,
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the fast invariant suite.
    Selftest,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Usage problems are contract errors.
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let start = Instant::now();
    match dispatch(cli, start) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn load_config(path: &Option<PathBuf>, overrides: &[String]) -> Result<AppConfig> {
    let mut cfg = match path {
        None => AppConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            config::parse(&text)?
        }
    };
    for assignment in overrides {
        config::apply_override(&mut cfg, assignment)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &AppConfig,
    start: Instant,
    extra: &[(String, String)],
) -> Result<()> {
    let mut s = String::new();
    s.push_str("# aid-run-manifest v1\n");
    s.push_str(&format!("command = {command}\n"));
    s.push_str(&format!("version = {}\n", aid_core::VERSION));
    s.push_str(&format!("git = {GIT_DESCRIBE}\n"));
    s.push_str(&format!("wall_time_ms = {}\n", start.elapsed().as_millis()));
    s.push_str(&format!("divergences = {DIVERGENCE_NOTES}\n"));
    for (k, v) in extra {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s.push_str(&config::serialize(cfg));
    trace::write_atomic(&out.join("manifest.txt"), s.as_bytes())
}

fn build_world(cfg: &AppConfig) -> Result<(Vec<(toydata::ToyPrompt, toydata::ToyGrid)>, Vec<aid_core::objectives::PreferencePair>)> {
    let data = toydata::generate_dataset(cfg.data.size, cfg.data.seed, &cfg.model, cfg.data.grid_side)?;
    let pairs = toydata::make_preference_pairs(&data, cfg.data.seed, &cfg.model)?;
    Ok((data, pairs))
}

fn moment_sets(trainable: &ParamSet<f32>, state: &trainer::TrainState) -> (ParamSet<f32>, ParamSet<f32>) {
    let mut m = ParamSet::new();
    let mut v = ParamSet::new();
    for (i, p) in trainable.iter().enumerate() {
        m.push(p.name.clone(), p.shape, state.opt.m[i].clone());
        v.push(p.name.clone(), p.shape, state.opt.v[i].clone());
    }
    (m, v)
}

fn dispatch(cli: Cli, start: Instant) -> Result<()> {
    match cli.cmd {
        Cmd::Pretrain {
            config,
            out,
            mut set,
            steps,
            seed,
        } => {
            if let Some(s) = steps {
                set.push(format!("pretrain.steps={s}"));
            }
            if let Some(s) = seed {
                set.push(format!("pretrain.seed={s}"));
            }
            let cfg = load_config(&config, &set)?;
            let data = toydata::generate_dataset(
                cfg.data.size,
                cfg.data.seed,
                &cfg.model,
                cfg.data.grid_side,
            )?;
            let val = toydata::generate_dataset(
                (cfg.data.size / 8).max(16),
                rng::derive(cfg.data.seed, 0x76616c), // validation split seed
                &cfg.model,
                cfg.data.grid_side,
            )?;
            let (backbone, report) = trainer::pretrain_backbone(&cfg.model, &data, &val, &cfg.pretrain)?;

            let ckpt = Checkpoint {
                kind: CheckpointKind::Backbone,
                config: cfg.clone(),
                step: cfg.pretrain.steps,
                divergences: DIVERGENCE_NOTES.to_string(),
                backbone: backbone.params.clone(),
                aid: None,
                lora: None,
                state: None,
            };
            checkpoint::save(&ckpt, &out.join("checkpoint"))?;
            trace::write_atomic(
                &out.join("pretrain_log.csv"),
                render_pretrain_log(&report.losses).as_bytes(),
            )?;
            trace::write_dataset(&out.join("dataset.txt"), &data)?;
            write_manifest(
                &out,
                "pretrain",
                &cfg,
                start,
                &[
                    ("init_val_loss".into(), format!("{}", report.init_val_loss)),
                    ("final_val_loss".into(), format!("{}", report.final_val_loss)),
                    (
                        "val_improvement".into(),
                        format!("{}", report.init_val_loss - report.final_val_loss),
                    ),
                ],
            )?;
            println!(
                "pretrain: {} steps, validation loss {} -> {}",
                cfg.pretrain.steps, report.init_val_loss, report.final_val_loss
            );
            Ok(())
        }

        Cmd::TrainAid {
            config,
            backbone,
            out,
            mut set,
            mode,
            steps,
            skip_p,
            lambda_reg,
            lambda_dpo,
            seed,
            resume,
        } => {
            if let Some(v) = mode {
                set.push(format!("train.mode={v}"));
            }
            if let Some(v) = steps {
                set.push(format!("train.steps={v}"));
            }
            if let Some(v) = skip_p {
                set.push(format!("train.skip_p={v}"));
            }
            if let Some(v) = lambda_reg {
                set.push(format!("train.lambda_reg={v}"));
            }
            if let Some(v) = lambda_dpo {
                set.push(format!("train.lambda_dpo={v}"));
            }
            if let Some(v) = seed {
                set.push(format!("train.seed={v}"));
            }
            let cfg = load_config(&config, &set)?;
            let backbone_ckpt = checkpoint::load(&backbone)?;
            let model = backbone_ckpt.backbone_model()?;
            if model.config != cfg.model {
                return Err(Error::Config(format!(
                    "checkpoint model config {:?} differs from requested {:?}",
                    model.config, cfg.model
                )));
            }
            let (data, pairs) = build_world(&cfg)?;

            let resume_point = match &resume {
                None => None,
                Some(dir) => {
                    let prev = checkpoint::load(dir)?;
                    let aid = prev.aid_params()?;
                    let lora = prev.lora_params()?;
                    let trainable = match (&aid, &lora) {
                        (Some(a), _) => &a.params,
                        (_, Some(l)) => &l.params,
                        _ => {
                            return Err(Error::Config(
                                "resume checkpoint holds no trainable stacks".into(),
                            ))
                        }
                    };
                    let state = prev.train_state(trainable)?.ok_or_else(|| {
                        Error::Config("resume checkpoint lacks optimizer state".into())
                    })?;
                    Some(ResumePoint {
                        aid,
                        lora,
                        state,
                        steps_done: prev.step,
                    })
                }
            };

            let run = trainer::train_aid(&model, &pairs, &cfg.train, resume_point)?;

            let (kind, trainable): (CheckpointKind, &ParamSet<f32>) = match (&run.aid, &run.lora) {
                (Some(a), _) => (CheckpointKind::Aid, &a.params),
                (_, Some(l)) => (CheckpointKind::Lora, &l.params),
                _ => unreachable!(),
            };
            let (opt_m, opt_v) = moment_sets(trainable, &run.state);
            let ckpt = Checkpoint {
                kind,
                config: cfg.clone(),
                step: cfg.train.steps,
                divergences: DIVERGENCE_NOTES.to_string(),
                backbone: model.params.clone(),
                aid: run.aid.as_ref().map(|a| a.params.clone()),
                lora: run.lora.as_ref().map(|l| l.params.clone()),
                state: Some(SavedTrainState {
                    opt_step: run.state.opt.step,
                    rng_seed: run.state.rng_seed,
                    rng_word_pos: run.state.rng_word_pos,
                    opt_m,
                    opt_v,
                }),
            };
            checkpoint::save(&ckpt, &out.join("checkpoint"))?;
            trace::write_atomic(
                &out.join("train_log.csv"),
                trainer::render_train_log(&run.logs).as_bytes(),
            )?;
            trace::write_dataset(&out.join("dataset.txt"), &data)?;

            let final_pref = run.logs.last().map(|l| l.preference_accuracy).unwrap_or(0.0);
            let final_alpha = run.logs.last().map(|l| l.mean_abs_alpha).unwrap_or(0.0);
            write_manifest(
                &out,
                "train-aid",
                &cfg,
                start,
                &[
                    ("mode".into(), cfg.train.mode.as_str().into()),
                    ("final_preference_accuracy".into(), format!("{final_pref}")),
                    ("final_mean_abs_alpha".into(), format!("{final_alpha}")),
                ],
            )?;
            println!(
                "train-aid: {} steps ({}), final mean |alpha| {final_alpha}, preference accuracy {final_pref}",
                cfg.train.steps,
                cfg.train.mode.as_str()
            );
            Ok(())
        }

        Cmd::Sample {
            config,
            ckpt,
            out,
            mut set,
            aid_mode,
            seed,
            steps,
            cfg_scale,
            capture_alpha,
            capture_attn,
            prompt,
            enhance_blocks,
            enhance_value,
            run_id,
        } => {
            if let Some(v) = aid_mode {
                set.push(format!("sampler.aid_mode={v}"));
            }
            if let Some(v) = seed {
                set.push(format!("sampler.seed={v}"));
            }
            if let Some(v) = steps {
                set.push(format!("sampler.num_steps={v}"));
            }
            if let Some(v) = cfg_scale {
                set.push(format!("sampler.cfg_scale={v}"));
            }
            if capture_alpha {
                set.push("sampler.capture_alpha=true".into());
            }
            if capture_attn {
                set.push("sampler.capture_attention_norm=true".into());
            }
            let mut cfg = load_config(&config, &set)?;
            let loaded = checkpoint::load(&ckpt)?;
            // The checkpoint's model config governs shapes.
            cfg.model = loaded.config.model.clone();
            cfg.data.grid_side = loaded.config.data.grid_side;
            let backbone = loaded.backbone_model()?;
            let aid = loaded.aid_params()?;
            let lora = loaded.lora_params()?;

            let prompt = match &prompt {
                Some(text) => parse_prompt(text, cfg.model.text_len)?,
                None => {
                    let mut r = rng::seeded(rng::derive(cfg.sampler.seed, 0x70726f6d));
                    let color = (rng::uniform_f64(&mut r) * toydata::NUM_COLORS as f64) as u8;
                    let count = 1 + (rng::uniform_f64(&mut r) * toydata::NUM_COUNTS as f64) as u8;
                    toydata::make_prompt(
                        color.min(toydata::NUM_COLORS - 1),
                        count.min(toydata::NUM_COUNTS),
                        cfg.model.text_len,
                    )?
                }
            };

            let sparse = match (&cfg.sampler.aid_mode, &enhance_blocks) {
                (AidMode::SparseEnhanced, Some(list)) => {
                    let blocks: Vec<usize> = list
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| {
                            s.trim().parse().map_err(|_| {
                                Error::Config(format!("bad block index `{s}` in --enhance-blocks"))
                            })
                        })
                        .collect::<Result<_>>()?;
                    Some(aid_core::aid::sparse_enhancement_stack(
                        &blocks,
                        enhance_value,
                        cfg.model.num_blocks,
                    )?)
                }
                (AidMode::SparseEnhanced, None) => {
                    return Err(Error::Config(
                        "aid_mode=sparse_enhanced needs --enhance-blocks".into(),
                    ))
                }
                _ => None,
            };

            let source = SampleSource {
                backbone: &backbone,
                aid: aid.as_ref(),
                lora: lora.as_ref(),
                sparse: sparse.as_deref(),
            };
            let run = run_id.unwrap_or_else(|| {
                out.file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "run".into())
            });
            let traj = sample(&source, &prompt.tokens, &cfg.sampler, &run)?;

            trace::write_trajectory(&out.join("trajectory.csv"), &traj.states)?;
            if cfg.sampler.capture_alpha {
                trace::write_alpha_trace(&out.join("alpha.trace"), &run, &traj.alphas)?;
            }
            if cfg.sampler.capture_attention_norm {
                trace::write_attn_trace(&out.join("attn.trace"), &run, &traj.attention_norms)?;
            }
            let side = cfg.data.grid_side;
            let grid = toydata::decode(traj.final_latent(), cfg.model.feature_dim, side)?;
            let report = toydata::adherence(&prompt, &grid);
            trace::write_atomic(
                &out.join("decoded.txt"),
                trace::render_grid_file(&grid, Some(&report)).as_bytes(),
            )?;
            write_manifest(
                &out,
                "sample",
                &cfg,
                start,
                &[
                    ("run".into(), run.clone()),
                    ("prompt_color".into(), format!("{}", prompt.color)),
                    ("prompt_count".into(), format!("{}", prompt.count)),
                    ("adherence".into(), format!("{}", report.accuracy)),
                ],
            )?;
            println!(
                "sample: run {run}, prompt color={} count={}, adherence {}",
                prompt.color, prompt.count, report.accuracy
            );
            Ok(())
        }

        Cmd::Analyze {
            traces,
            out,
            select_k,
        } => {
            let alpha_path = traces.join("alpha.trace");
            let records = trace::read_alpha_trace(&alpha_path)?;
            for axis in [Axis::Block, Axis::Token, Axis::Timestep] {
                let rows = analytics::distribution_by(&records, axis);
                trace::write_atomic(
                    &out.join(format!("alpha_by_{}.csv", axis.name())),
                    trace::render_distribution_csv(axis, &rows).as_bytes(),
                )?;
            }
            let table = analytics::block_timestep_heatmap(&records);
            trace::write_atomic(
                &out.join("alpha_heatmap.csv"),
                trace::render_heatmap_csv(&table).as_bytes(),
            )?;

            let attn_path = traces.join("attn.trace");
            let mut extra: Vec<(String, String)> = vec![
                ("records".into(), format!("{}", records.len())),
                ("heatmap_cells".into(), format!("{}", table.num_cells())),
            ];
            if attn_path.exists() {
                let samples = trace::read_attn_trace(&attn_path)?;
                let curve = analytics::attention_norm_curve(&samples);
                trace::write_atomic(
                    &out.join("attn_norm.csv"),
                    trace::render_attn_csv(&curve).as_bytes(),
                )?;
                extra.push(("attn_samples".into(), format!("{}", samples.len())));
            }
            if let Some(k) = select_k {
                let selected = analytics::select_enhancement_blocks(&records, k);
                let list = selected
                    .iter()
                    .map(|b| b.to_string())
                    .collect::<Vec<_>>()
                    .join(",");
                trace::write_atomic(
                    &out.join("selected_blocks.txt"),
                    format!("# aid-selection v1\nblocks = {list}\n").as_bytes(),
                )?;
                extra.push(("selected_blocks".into(), list));
            }
            write_manifest(&out, "analyze", &AppConfig::default(), start, &extra)?;
            println!("analyze: {} records aggregated into {}", records.len(), out.display());
            Ok(())
        }

        Cmd::Gradcheck {
            precision,
            tolerance,
            seed,
        } => {
            let cfg = ModelConfig::gradcheck_default();
            let report = match precision.as_str() {
                "high" => {
                    let tol = tolerance.unwrap_or(1e-6);
                    gradcheck::full_model_check::<f64>(&cfg, seed, tol, 1e-5)?
                }
                "standard" => {
                    // f32 forward evaluations put a noise floor under the
                    // finite differences; the default budget reflects it.
                    let tol = tolerance.unwrap_or(1e-3);
                    gradcheck::full_model_check::<f32>(&cfg, seed, tol, 1e-2)?
                }
                other => {
                    return Err(Error::Config(format!(
                        "--precision must be high|standard, got {other}"
                    )))
                }
            };
            print!("{}", report.render_text());
            if report.passed() {
                Ok(())
            } else {
                Err(Error::numeric(
                    "gradcheck",
                    format!("{} parameters exceeded tolerance", report.failures().count()),
                ))
            }
        }

        Cmd::Selftest => {
            let report = selftest::run();
            print!("{}", report.render_text());
            if report.passed() {
                Ok(())
            } else {
                Err(Error::Contract("selftest failed".into()))
            }
        }
    }
}

fn render_pretrain_log(losses: &[f64]) -> String {
    let mut s = String::from("# aid-pretrain-log v1\nstep,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

/// Parse "color=K,count=N".
fn parse_prompt(text: &str, text_len: usize) -> Result<toydata::ToyPrompt> {
    let mut color: Option<u8> = None;
    let mut count: Option<u8> = None;
    for part in text.split(',') {
        let Some((k, v)) = part.split_once('=') else {
            return Err(Error::Config(format!(
                "prompt part `{part}` is not key=value"
            )));
        };
        let v: u8 = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad prompt value `{v}`")))?;
        match k.trim() {
            "color" => color = Some(v),
            "count" => count = Some(v),
            other => return Err(Error::Config(format!("unknown prompt key `{other}`"))),
        }
    }
    let (Some(color), Some(count)) = (color, count) else {
        return Err(Error::Config(
            "prompt needs both color=<0..5> and count=<1..4>".into(),
        ));
    };
    toydata::make_prompt(color, count, text_len)
}
