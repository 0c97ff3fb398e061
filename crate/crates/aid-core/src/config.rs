//! Structured key/value configuration: `[section]` headers over `key =
//! value` lines. Unknown sections or keys are hard errors; every value is
//! range-checked with the offending field named. An empty document yields
//! the documented defaults.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampler::{AidMode, SamplerConfig};
use crate::trainer::{PretrainConfig, TrainConfig, TrainMode};

pub const CONFIG_MAGIC: &str = "# aid-config v1";

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub size: usize,
    pub seed: u64,
    pub grid_side: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            size: 512,
            seed: 2,
            grid_side: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
}

impl AppConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.data.size == 0 {
            return Err(Error::Config("data.size must be >= 1".into()));
        }
        if self.data.grid_side * self.data.grid_side != self.model.image_len {
            return Err(Error::Config(format!(
                "data.grid_side {} squared must equal model.image_len {}",
                self.data.grid_side, self.model.image_len
            )));
        }
        if self.model.text_len < 2 {
            return Err(Error::Config(
                "model.text_len must be >= 2 (two attribute tokens)".into(),
            ));
        }
        if self.model.vocab_size < 12 {
            return Err(Error::Config(
                "model.vocab_size must be >= 12 to cover the prompt tokens".into(),
            ));
        }
        Ok(())
    }
}

/// Generic `[section]` / `key = value` splitter, shared with the
/// checkpoint manifest. Comment lines start with '#'.
pub fn parse_sections(text: &str) -> Result<Vec<(String, Vec<(String, String)>)>> {
    let mut out: Vec<(String, Vec<(String, String)>)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            out.push((name.trim().to_string(), Vec::new()));
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{raw}`",
                lineno + 1
            )));
        };
        let Some(section) = out.last_mut() else {
            return Err(Error::Config(format!(
                "line {}: `{raw}` appears before any [section]",
                lineno + 1
            )));
        };
        section
            .1
            .push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn parse_u64(section: &str, key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{section}.{key}: `{v}` is not an unsigned integer")))
}

fn parse_usize(section: &str, key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{section}.{key}: `{v}` is not an unsigned integer")))
}

fn parse_f64(section: &str, key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{section}.{key}: `{v}` is not a number")))
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{section}.{key}: `{v}` is not true|false"
        ))),
    }
}

/// Apply one `section.key = value` assignment.
fn apply(cfg: &mut AppConfig, section: &str, key: &str, value: &str) -> Result<()> {
    let unknown = || {
        Err(Error::Config(format!(
            "unknown configuration key {section}.{key}"
        )))
    };
    match section {
        "model" => match key {
            "num_blocks" => cfg.model.num_blocks = parse_usize(section, key, value)?,
            "feature_dim" => cfg.model.feature_dim = parse_usize(section, key, value)?,
            "num_heads" => cfg.model.num_heads = parse_usize(section, key, value)?,
            "text_len" => cfg.model.text_len = parse_usize(section, key, value)?,
            "image_len" => cfg.model.image_len = parse_usize(section, key, value)?,
            "vocab_size" => cfg.model.vocab_size = parse_usize(section, key, value)?,
            "aid_hidden_dim" => cfg.model.aid_hidden_dim = parse_usize(section, key, value)?,
            "seed" => cfg.model.seed = parse_u64(section, key, value)?,
            _ => return unknown(),
        },
        "pretrain" => match key {
            "steps" => cfg.pretrain.steps = parse_u64(section, key, value)?,
            "batch_size" => cfg.pretrain.batch_size = parse_usize(section, key, value)?,
            "learning_rate" => cfg.pretrain.learning_rate = parse_f64(section, key, value)?,
            "cond_dropout" => cfg.pretrain.cond_dropout = parse_f64(section, key, value)?,
            "seed" => cfg.pretrain.seed = parse_u64(section, key, value)?,
            _ => return unknown(),
        },
        "train" => match key {
            "steps" => cfg.train.steps = parse_u64(section, key, value)?,
            "batch_size" => cfg.train.batch_size = parse_usize(section, key, value)?,
            "learning_rate" => cfg.train.learning_rate = parse_f64(section, key, value)?,
            "lambda_dpo" => cfg.train.lambda_dpo = parse_f64(section, key, value)?,
            "lambda_reg" => cfg.train.lambda_reg = parse_f64(section, key, value)?,
            "beta" => cfg.train.beta = parse_f64(section, key, value)?,
            "skip_p" => cfg.train.skip_p = parse_f64(section, key, value)?,
            "seed" => cfg.train.seed = parse_u64(section, key, value)?,
            "mode" => cfg.train.mode = TrainMode::parse(value)?,
            "grad_accum" => cfg.train.grad_accum = parse_usize(section, key, value)?,
            "lora_rank" => cfg.train.lora_rank = parse_usize(section, key, value)?,
            "adam_beta1" => cfg.train.adam.beta1 = parse_f64(section, key, value)?,
            "adam_beta2" => cfg.train.adam.beta2 = parse_f64(section, key, value)?,
            "adam_eps" => cfg.train.adam.eps = parse_f64(section, key, value)?,
            "weight_decay" => cfg.train.adam.weight_decay = parse_f64(section, key, value)?,
            _ => return unknown(),
        },
        "sampler" => match key {
            "num_steps" => cfg.sampler.num_steps = parse_usize(section, key, value)?,
            "cfg_scale" => cfg.sampler.cfg_scale = parse_f64(section, key, value)?,
            "seed" => cfg.sampler.seed = parse_u64(section, key, value)?,
            "capture_alpha" => cfg.sampler.capture_alpha = parse_bool(section, key, value)?,
            "capture_attention_norm" => {
                cfg.sampler.capture_attention_norm = parse_bool(section, key, value)?
            }
            "aid_mode" => cfg.sampler.aid_mode = AidMode::parse(value)?,
            _ => return unknown(),
        },
        "data" => match key {
            "size" => cfg.data.size = parse_usize(section, key, value)?,
            "seed" => cfg.data.seed = parse_u64(section, key, value)?,
            "grid_side" => cfg.data.grid_side = parse_usize(section, key, value)?,
            _ => return unknown(),
        },
        _ => {
            return Err(Error::Config(format!(
                "unknown configuration section [{section}]"
            )))
        }
    }
    Ok(())
}

pub fn parse(text: &str) -> Result<AppConfig> {
    let mut cfg = AppConfig::default();
    for (section, entries) in parse_sections(text)? {
        for (key, value) in entries {
            apply(&mut cfg, &section, &key, &value)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Apply a single assignment; used by manifests that embed config sections.
pub fn apply_kv(cfg: &mut AppConfig, section: &str, key: &str, value: &str) -> Result<()> {
    apply(cfg, section, key, value)
}

/// Apply a `section.key=value` command-line override.
pub fn apply_override(cfg: &mut AppConfig, assignment: &str) -> Result<()> {
    let Some((path, value)) = assignment.split_once('=') else {
        return Err(Error::Config(format!(
            "override `{assignment}` is not of the form section.key=value"
        )));
    };
    let Some((section, key)) = path.trim().split_once('.') else {
        return Err(Error::Config(format!(
            "override `{assignment}` is not of the form section.key=value"
        )));
    };
    apply(cfg, section.trim(), key.trim(), value.trim())
}

pub fn serialize(cfg: &AppConfig) -> String {
    let mut s = String::new();
    s.push_str(CONFIG_MAGIC);
    s.push('\n');
    s.push_str("[model]\n");
    s.push_str(&format!("num_blocks = {}\n", cfg.model.num_blocks));
    s.push_str(&format!("feature_dim = {}\n", cfg.model.feature_dim));
    s.push_str(&format!("num_heads = {}\n", cfg.model.num_heads));
    s.push_str(&format!("text_len = {}\n", cfg.model.text_len));
    s.push_str(&format!("image_len = {}\n", cfg.model.image_len));
    s.push_str(&format!("vocab_size = {}\n", cfg.model.vocab_size));
    s.push_str(&format!("aid_hidden_dim = {}\n", cfg.model.aid_hidden_dim));
    s.push_str(&format!("seed = {}\n", cfg.model.seed));
    s.push_str("[pretrain]\n");
    s.push_str(&format!("steps = {}\n", cfg.pretrain.steps));
    s.push_str(&format!("batch_size = {}\n", cfg.pretrain.batch_size));
    s.push_str(&format!("learning_rate = {}\n", cfg.pretrain.learning_rate));
    s.push_str(&format!("cond_dropout = {}\n", cfg.pretrain.cond_dropout));
    s.push_str(&format!("seed = {}\n", cfg.pretrain.seed));
    s.push_str("[train]\n");
    s.push_str(&format!("steps = {}\n", cfg.train.steps));
    s.push_str(&format!("batch_size = {}\n", cfg.train.batch_size));
    s.push_str(&format!("learning_rate = {}\n", cfg.train.learning_rate));
    s.push_str(&format!("lambda_dpo = {}\n", cfg.train.lambda_dpo));
    s.push_str(&format!("lambda_reg = {}\n", cfg.train.lambda_reg));
    s.push_str(&format!("beta = {}\n", cfg.train.beta));
    s.push_str(&format!("skip_p = {}\n", cfg.train.skip_p));
    s.push_str(&format!("seed = {}\n", cfg.train.seed));
    s.push_str(&format!("mode = {}\n", cfg.train.mode.as_str()));
    s.push_str(&format!("grad_accum = {}\n", cfg.train.grad_accum));
    s.push_str(&format!("lora_rank = {}\n", cfg.train.lora_rank));
    s.push_str(&format!("adam_beta1 = {}\n", cfg.train.adam.beta1));
    s.push_str(&format!("adam_beta2 = {}\n", cfg.train.adam.beta2));
    s.push_str(&format!("adam_eps = {}\n", cfg.train.adam.eps));
    s.push_str(&format!("weight_decay = {}\n", cfg.train.adam.weight_decay));
    s.push_str("[sampler]\n");
    s.push_str(&format!("num_steps = {}\n", cfg.sampler.num_steps));
    s.push_str(&format!("cfg_scale = {}\n", cfg.sampler.cfg_scale));
    s.push_str(&format!("seed = {}\n", cfg.sampler.seed));
    s.push_str(&format!("capture_alpha = {}\n", cfg.sampler.capture_alpha));
    s.push_str(&format!(
        "capture_attention_norm = {}\n",
        cfg.sampler.capture_attention_norm
    ));
    s.push_str(&format!("aid_mode = {}\n", cfg.sampler.aid_mode.as_str()));
    s.push_str("[data]\n");
    s.push_str(&format!("size = {}\n", cfg.data.size));
    s.push_str(&format!("seed = {}\n", cfg.data.seed));
    s.push_str(&format!("grid_side = {}\n", cfg.data.grid_side));
    s
}
