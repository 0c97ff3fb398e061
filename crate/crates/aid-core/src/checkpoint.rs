//! Checkpoint persistence: a directory holding a human-readable text
//! manifest plus one little-endian f32 blob file. Loading verifies the
//! content hash; version mismatches are explicit migration errors.

use std::fs;
use std::path::Path;

use crate::aid::AidParams;
use crate::config::{self, AppConfig};
use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use crate::lora::LoraParams;
use crate::model::Backbone;
use crate::optim::AdamState;
use crate::params::ParamSet;
use crate::trace::write_atomic;
use crate::trainer::TrainState;

pub const CHECKPOINT_MAGIC: &str = "# aid-checkpoint v1";
const MANIFEST_FILE: &str = "manifest.txt";
const PARAMS_FILE: &str = "params.bin";

/// Divergences from the usual large-scale recipe, recorded in every
/// manifest this crate writes.
pub const DIVERGENCE_NOTES: &str = "optimizer=adamw-fixed-lr; sampler=euler-uniform-grid; \
     timestep-conditioning=additive-sinusoidal; velocity-head=image-tokens-ln-linear";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Backbone,
    Aid,
    Lora,
}

impl CheckpointKind {
    fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Backbone => "backbone",
            CheckpointKind::Aid => "aid",
            CheckpointKind::Lora => "lora",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(CheckpointKind::Backbone),
            "aid" => Ok(CheckpointKind::Aid),
            "lora" => Ok(CheckpointKind::Lora),
            other => Err(Error::Config(format!("unknown checkpoint kind {other}"))),
        }
    }
}

/// Serialized optimizer/rng position.
#[derive(Debug, Clone)]
pub struct SavedTrainState {
    pub opt_step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub opt_m: ParamSet<f32>,
    pub opt_v: ParamSet<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// Configuration snapshot; `config.model` governs parameter shapes.
    pub config: AppConfig,
    /// Optimizer steps completed by the run that wrote this checkpoint.
    pub step: u64,
    pub divergences: String,
    pub backbone: ParamSet<f32>,
    pub aid: Option<ParamSet<f32>>,
    pub lora: Option<ParamSet<f32>>,
    pub state: Option<SavedTrainState>,
}

impl Checkpoint {
    pub fn backbone_model(&self) -> Result<Backbone<f32>> {
        Backbone::from_params(self.config.model.clone(), self.backbone.clone())
    }

    pub fn aid_params(&self) -> Result<Option<AidParams<f32>>> {
        self.aid
            .as_ref()
            .map(|p| AidParams::from_params(&self.config.model, p.clone()))
            .transpose()
    }

    pub fn lora_params(&self) -> Result<Option<LoraParams<f32>>> {
        match &self.lora {
            None => Ok(None),
            Some(p) => Ok(Some(LoraParams {
                rank: self.config.train.lora_rank,
                num_blocks: self.config.model.num_blocks,
                params: p.clone(),
            })),
        }
    }

    /// Rebuild the optimizer/rng state aligned with `trainable`'s order.
    pub fn train_state(&self, trainable: &ParamSet<f32>) -> Result<Option<TrainState>> {
        let Some(saved) = &self.state else {
            return Ok(None);
        };
        let mut m = Vec::with_capacity(trainable.len());
        let mut v = Vec::with_capacity(trainable.len());
        for p in trainable.iter() {
            let pm = saved.opt_m.by_name(&p.name).ok_or_else(|| {
                Error::Config(format!("checkpoint lacks first moment for {}", p.name))
            })?;
            let pv = saved.opt_v.by_name(&p.name).ok_or_else(|| {
                Error::Config(format!("checkpoint lacks second moment for {}", p.name))
            })?;
            m.push(pm.data.clone());
            v.push(pv.data.clone());
        }
        Ok(Some(TrainState {
            opt: AdamState {
                step: saved.opt_step,
                m,
                v,
            },
            rng_seed: saved.rng_seed,
            rng_word_pos: saved.rng_word_pos,
        }))
    }
}

fn blob_groups(ckpt: &Checkpoint) -> Vec<(&'static str, &ParamSet<f32>)> {
    let mut groups: Vec<(&'static str, &ParamSet<f32>)> = vec![("backbone", &ckpt.backbone)];
    if let Some(aid) = &ckpt.aid {
        groups.push(("aid", aid));
    }
    if let Some(lora) = &ckpt.lora {
        groups.push(("lora", lora));
    }
    if let Some(state) = &ckpt.state {
        groups.push(("opt.m", &state.opt_m));
        groups.push(("opt.v", &state.opt_v));
    }
    groups
}

pub fn save(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut blob: Vec<u8> = Vec::new();
    let mut param_lines = String::new();
    for (group, set) in blob_groups(ckpt) {
        for p in set.iter() {
            let offset = blob.len();
            for &x in &p.data {
                blob.extend_from_slice(&x.to_le_bytes());
            }
            param_lines.push_str(&format!(
                "{group}/{} = {}x{} @ {offset}\n",
                p.name, p.shape[0], p.shape[1]
            ));
        }
    }
    let hash = fnv1a64(&blob);

    let mut manifest = String::new();
    manifest.push_str(CHECKPOINT_MAGIC);
    manifest.push('\n');
    manifest.push_str("[checkpoint]\n");
    manifest.push_str(&format!("kind = {}\n", ckpt.kind.as_str()));
    manifest.push_str(&format!("step = {}\n", ckpt.step));
    manifest.push_str(&format!("params_hash = {hash:016x}\n"));
    manifest.push_str(&format!("divergences = {}\n", ckpt.divergences));
    if let Some(state) = &ckpt.state {
        manifest.push_str("[state]\n");
        manifest.push_str(&format!("opt_step = {}\n", state.opt_step));
        manifest.push_str(&format!("rng_seed = {}\n", state.rng_seed));
        manifest.push_str(&format!("rng_word_pos = {}\n", state.rng_word_pos));
    }
    manifest.push_str(&config::serialize(&ckpt.config));
    manifest.push_str("[params]\n");
    manifest.push_str(&param_lines);

    write_atomic(&dir.join(PARAMS_FILE), blob.as_slice())?;
    write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    Ok(())
}

fn take_blob(blob: &[u8], offset: usize, shape: [usize; 2], path: &Path, name: &str) -> Result<Vec<f32>> {
    let n = shape[0] * shape[1];
    let end = offset + 4 * n;
    if end > blob.len() {
        return Err(Error::format(
            path,
            format!("parameter {name} extends past the blob ({end} > {})", blob.len()),
        ));
    }
    Ok(blob[offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let first = text.lines().next().unwrap_or_default();
    if first != CHECKPOINT_MAGIC {
        if first.starts_with("# aid-checkpoint") {
            return Err(Error::format(
                &manifest_path,
                format!("version mismatch: found `{first}`, this build reads `{CHECKPOINT_MAGIC}`; migrate explicitly"),
            ));
        }
        return Err(Error::format(
            &manifest_path,
            format!("not a checkpoint manifest (first line `{first}`)"),
        ));
    }

    let params_path = dir.join(PARAMS_FILE);
    let blob = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;

    let mut kind = None;
    let mut step = 0u64;
    let mut divergences = String::new();
    let mut expected_hash: Option<String> = None;
    let mut opt_step = 0u64;
    let mut rng_seed = 0u64;
    let mut rng_word_pos = 0u128;
    let mut has_state = false;
    let mut config = AppConfig::default();
    let mut sets: std::collections::BTreeMap<String, ParamSet<f32>> = Default::default();

    for (section, entries) in config::parse_sections(&text)? {
        match section.as_str() {
            "checkpoint" => {
                for (k, v) in entries {
                    match k.as_str() {
                        "kind" => kind = Some(CheckpointKind::parse(&v)?),
                        "step" => {
                            step = v.parse().map_err(|_| {
                                Error::format(&manifest_path, format!("bad step {v}"))
                            })?
                        }
                        "params_hash" => expected_hash = Some(v),
                        "divergences" => divergences = v,
                        other => {
                            return Err(Error::format(
                                &manifest_path,
                                format!("unknown checkpoint field {other}"),
                            ))
                        }
                    }
                }
            }
            "state" => {
                has_state = true;
                for (k, v) in entries {
                    let bad = |what: &str| Error::format(&manifest_path, format!("bad {what} {v}"));
                    match k.as_str() {
                        "opt_step" => opt_step = v.parse().map_err(|_| bad("opt_step"))?,
                        "rng_seed" => rng_seed = v.parse().map_err(|_| bad("rng_seed"))?,
                        "rng_word_pos" => {
                            rng_word_pos = v.parse().map_err(|_| bad("rng_word_pos"))?
                        }
                        other => {
                            return Err(Error::format(
                                &manifest_path,
                                format!("unknown state field {other}"),
                            ))
                        }
                    }
                }
            }
            "params" => {
                for (name, desc) in entries {
                    // `<group>/<param> = RxC @ offset`
                    let (group, pname) = name.split_once('/').ok_or_else(|| {
                        Error::format(&manifest_path, format!("bad parameter name {name}"))
                    })?;
                    let (shape_part, offset_part) = desc.split_once('@').ok_or_else(|| {
                        Error::format(&manifest_path, format!("bad parameter line {desc}"))
                    })?;
                    let (r, c) = shape_part.trim().split_once('x').ok_or_else(|| {
                        Error::format(&manifest_path, format!("bad shape {shape_part}"))
                    })?;
                    let shape = [
                        r.trim().parse().map_err(|_| {
                            Error::format(&manifest_path, format!("bad rows {r}"))
                        })?,
                        c.trim().parse().map_err(|_| {
                            Error::format(&manifest_path, format!("bad cols {c}"))
                        })?,
                    ];
                    let offset: usize = offset_part.trim().parse().map_err(|_| {
                        Error::format(&manifest_path, format!("bad offset {offset_part}"))
                    })?;
                    let data = take_blob(&blob, offset, shape, &params_path, &name)?;
                    sets.entry(group.to_string())
                        .or_insert_with(ParamSet::new)
                        .push(pname, shape, data);
                }
            }
            // Configuration sections reuse the config-file schema.
            other => {
                for (k, v) in entries {
                    config::apply_kv(&mut config, other, &k, &v)?;
                }
            }
        }
    }

    let hash = format!("{:016x}", fnv1a64(&blob));
    match expected_hash {
        Some(h) if h == hash => {}
        Some(h) => {
            return Err(Error::format(
                &params_path,
                format!("content hash mismatch: manifest {h}, blob {hash}"),
            ))
        }
        None => {
            return Err(Error::format(
                &manifest_path,
                "manifest lacks params_hash".to_string(),
            ))
        }
    }

    let kind = kind.ok_or_else(|| Error::format(&manifest_path, "manifest lacks kind".to_string()))?;
    let backbone = sets
        .remove("backbone")
        .ok_or_else(|| Error::format(&manifest_path, "missing backbone parameters".to_string()))?;
    let aid = sets.remove("aid");
    let lora = sets.remove("lora");
    let state = if has_state {
        let opt_m = sets
            .remove("opt.m")
            .ok_or_else(|| Error::format(&manifest_path, "missing opt.m blobs".to_string()))?;
        let opt_v = sets
            .remove("opt.v")
            .ok_or_else(|| Error::format(&manifest_path, "missing opt.v blobs".to_string()))?;
        Some(SavedTrainState {
            opt_step,
            rng_seed,
            rng_word_pos,
            opt_m,
            opt_v,
        })
    } else {
        None
    };

    Ok(Checkpoint {
        kind,
        config,
        step,
        divergences,
        backbone,
        aid,
        lora,
        state,
    })
}

/// Raw bytes of both checkpoint files, for bitwise round-trip checks.
pub fn raw_bytes(dir: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let m = dir.join(MANIFEST_FILE);
    let p = dir.join(PARAMS_FILE);
    Ok((
        fs::read(&m).map_err(|e| Error::io(&m, e))?,
        fs::read(&p).map_err(|e| Error::io(&p, e))?,
    ))
}

/// Truncate the blob file in place; test helper for integrity checks.
pub fn corrupt_blob_for_test(dir: &Path) -> Result<()> {
    let p = dir.join(PARAMS_FILE);
    let data = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let cut = data.len().saturating_sub(5);
    fs::write(&p, &data[..cut]).map_err(|e| Error::io(&p, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointPaths;
