//! Low-rank additive deltas on backbone linear weights, used by the
//! lora_sft / lora_dpo training modes as the alternative trainable surface
//! (modulation disabled in those modes).

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamSet;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};

pub const DEFAULT_RANK: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct LoraPairIds {
    pub a: TensorId,
    pub b: TensorId,
}

pub struct BlockLoraIds {
    pub qkv: LoraPairIds,
    pub ffn1: LoraPairIds,
    pub ffn2: LoraPairIds,
}

pub struct LoraIds {
    pub blocks: Vec<BlockLoraIds>,
    pub head: LoraPairIds,
}

#[derive(Debug, Clone)]
pub struct LoraParams<S> {
    pub rank: usize,
    pub num_blocks: usize,
    pub params: ParamSet<S>,
}

impl<S: Scalar> LoraParams<S> {
    /// `b` starts at zero, so the delta is exactly zero at initialization.
    pub fn init(cfg: &ModelConfig, rank: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if rank == 0 {
            return Err(Error::Config("lora rank must be >= 1".into()));
        }
        let d = cfg.feature_dim;
        let ffn = cfg.ffn_dim();
        let mut r = rng::seeded(rng::derive(seed, 0x6c6f_7261)); // "lora"
        let mut p = ParamSet::new();
        let normal = |r: &mut rand_chacha::ChaCha8Rng, n: usize, s: f64| -> Vec<S> {
            (0..n).map(|_| S::from_f64(rng::normal_f64(r) * s)).collect()
        };
        let sa = 1.0 / (d as f64).sqrt();
        for l in 0..cfg.num_blocks {
            p.push(format!("lora.block{l}.qkv.a"), [d, rank], normal(&mut r, d * rank, sa));
            p.push(format!("lora.block{l}.qkv.b"), [rank, 3 * d], vec![S::ZERO; rank * 3 * d]);
            p.push(format!("lora.block{l}.ffn1.a"), [d, rank], normal(&mut r, d * rank, sa));
            p.push(format!("lora.block{l}.ffn1.b"), [rank, ffn], vec![S::ZERO; rank * ffn]);
            p.push(
                format!("lora.block{l}.ffn2.a"),
                [ffn, rank],
                normal(&mut r, ffn * rank, 1.0 / (ffn as f64).sqrt()),
            );
            p.push(format!("lora.block{l}.ffn2.b"), [rank, d], vec![S::ZERO; rank * d]);
        }
        p.push("lora.head.a", [d, rank], normal(&mut r, d * rank, sa));
        p.push("lora.head.b", [rank, d], vec![S::ZERO; rank * d]);
        Ok(LoraParams {
            rank,
            num_blocks: cfg.num_blocks,
            params: p,
        })
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Result<LoraIds> {
        let ids = self.params.bind(tape, trainable)?;
        Ok(assemble_lora_ids(self.num_blocks, &mut ids.into_iter()))
    }
}

/// Rebuild the id struct from schema-ordered tensor ids.
pub fn assemble_lora_ids(
    num_blocks: usize,
    cur: &mut impl Iterator<Item = TensorId>,
) -> LoraIds {
    let mut next = || cur.next().expect("lora schema exhausted");
    let mut pair = || LoraPairIds { a: next(), b: next() };
    let mut blocks = Vec::with_capacity(num_blocks);
    for _ in 0..num_blocks {
        blocks.push(BlockLoraIds {
            qkv: pair(),
            ffn1: pair(),
            ffn2: pair(),
        });
    }
    LoraIds {
        blocks,
        head: pair(),
    }
}

/// `x W` plus, when present, the low-rank delta `(x A) B`.
pub fn linear<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    w: TensorId,
    lora: Option<LoraPairIds>,
) -> Result<TensorId> {
    let y = tape.matmul(x, w)?;
    match lora {
        None => Ok(y),
        Some(pair) => {
            let xa = tape.matmul(x, pair.a)?;
            let delta = tape.matmul(xa, pair.b)?;
            tape.add(y, delta)
        }
    }
}
