//! Per-block gated modulation: bounded per-token coefficients
//! `alpha = tanh(feature branch) * sigmoid(gate branch)` computed from the
//! block-0 text features and the timestep, applied as a residual rescaling
//! `c + c (*) alpha` of the text rows entering each block.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{sinusoidal_features, ModelConfig};
use crate::params::ParamSet;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};

/// One captured coefficient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaVector {
    /// One coefficient per text token, each strictly inside (-1, 1).
    pub values: Vec<f32>,
    pub block_index: usize,
    pub t: f64,
}

/// The two-branch weights of one block's modulation module.
pub struct AidBranchIds {
    pub w1: TensorId,
    pub u: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

pub struct AidBlockIds {
    pub feature: AidBranchIds,
    pub gate: AidBranchIds,
}

pub struct AidIds {
    pub blocks: Vec<AidBlockIds>,
}

/// One module instance per transformer block; the block index enters
/// through per-block parameters, the timestep through a learned projection
/// of the sinusoidal features added to each branch's hidden input.
#[derive(Debug, Clone)]
pub struct AidParams<S> {
    pub num_blocks: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub params: ParamSet<S>,
}

const BRANCHES: [&str; 2] = ["feat", "gate"];

impl<S: Scalar> AidParams<S> {
    /// Zero-init identity: the feature branch's output layer starts at
    /// zero, so every alpha is exactly 0 and the model behaves bit for bit
    /// like the plain backbone. The gate starts near sigmoid(0) = 0.5.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.feature_dim;
        let h = cfg.aid_hidden_dim;
        let mut r = rng::seeded(rng::derive(seed, 0x6169_64)); // "aid"
        let mut p = ParamSet::new();
        let scale_in = 1.0 / (d as f64).sqrt();
        let scale_out = 1.0 / (h as f64).sqrt();
        let normal = |r: &mut ChaCha8Rng, n: usize, s: f64| -> Vec<S> {
            (0..n).map(|_| S::from_f64(rng::normal_f64(r) * s)).collect()
        };
        for l in 0..cfg.num_blocks {
            for branch in BRANCHES {
                p.push(format!("aid{l}.{branch}.w1"), [d, h], normal(&mut r, d * h, scale_in));
                p.push(format!("aid{l}.{branch}.u"), [d, h], normal(&mut r, d * h, scale_in));
                p.push(format!("aid{l}.{branch}.b1"), [1, h], vec![S::ZERO; h]);
                let w2 = if branch == "feat" {
                    vec![S::ZERO; h]
                } else {
                    normal(&mut r, h, scale_out)
                };
                p.push(format!("aid{l}.{branch}.w2"), [h, 1], w2);
                p.push(format!("aid{l}.{branch}.b2"), [1, 1], vec![S::ZERO]);
            }
        }
        Ok(AidParams {
            num_blocks: cfg.num_blocks,
            feature_dim: d,
            hidden_dim: h,
            params: p,
        })
    }

    pub fn from_params(cfg: &ModelConfig, params: ParamSet<S>) -> Result<Self> {
        let expected = AidParams::<S>::init(cfg, 0)?;
        for want in expected.params.iter() {
            let got = params
                .by_name(&want.name)
                .ok_or_else(|| Error::Config(format!("aid parameter {} missing", want.name)))?;
            if got.shape != want.shape {
                return Err(Error::Config(format!(
                    "aid parameter {} has shape {:?}, expected {:?}",
                    want.name, got.shape, want.shape
                )));
            }
        }
        Ok(AidParams {
            num_blocks: cfg.num_blocks,
            feature_dim: cfg.feature_dim,
            hidden_dim: cfg.aid_hidden_dim,
            params,
        })
    }

    pub fn convert<T: Scalar>(&self) -> AidParams<T> {
        AidParams {
            num_blocks: self.num_blocks,
            feature_dim: self.feature_dim,
            hidden_dim: self.hidden_dim,
            params: self.params.convert(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Result<AidIds> {
        let ids = self.params.bind(tape, trainable)?;
        Ok(assemble_aid_ids(self.num_blocks, &mut ids.into_iter()))
    }
}

/// Rebuild the id struct from schema-ordered tensor ids.
pub fn assemble_aid_ids(
    num_blocks: usize,
    cur: &mut impl Iterator<Item = TensorId>,
) -> AidIds {
    let mut next = || cur.next().expect("aid schema exhausted");
    let mut blocks = Vec::with_capacity(num_blocks);
    for _ in 0..num_blocks {
        let feature = AidBranchIds {
            w1: next(),
            u: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        let gate = AidBranchIds {
            w1: next(),
            u: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        blocks.push(AidBlockIds { feature, gate });
    }
    AidIds { blocks }
}

fn branch_output<S: Scalar>(
    tape: &mut Tape<S>,
    b: &AidBranchIds,
    c0: TensorId,
    tau: TensorId,
) -> Result<TensorId> {
    let tok = tape.matmul(c0, b.w1)?;
    let tproj = tape.matmul(tau, b.u)?;
    let shift = tape.add(tproj, b.b1)?;
    let pre = tape.add_row(tok, shift)?;
    let hid = tape.tanh(pre)?;
    let out = tape.matmul(hid, b.w2)?;
    tape.add_row(out, b.b2)
}

/// Per-token coefficients for one block: `tanh(f(c_i, t)) * sigmoid(g(c_i, t))`,
/// each entry strictly inside (-1, 1). Returns an `N x 1` column.
pub fn compute_alpha<S: Scalar>(
    tape: &mut Tape<S>,
    block: &AidBlockIds,
    c0: TensorId,
    tau: TensorId,
) -> Result<TensorId> {
    let f = branch_output(tape, &block.feature, c0, tau)?;
    let g = branch_output(tape, &block.gate, c0, tau)?;
    let bounded = tape.tanh(f)?;
    let gate = tape.sigmoid(g)?;
    tape.mul(bounded, gate)
}

/// Residual modulation: row i of the output is `c_i * (1 + alpha_i)`, the
/// per-token scalar broadcast across the feature axis.
pub fn apply_modulation<S: Scalar>(
    tape: &mut Tape<S>,
    c: TensorId,
    alpha: TensorId,
) -> Result<TensorId> {
    let scaled = tape.scale_rows(c, alpha)?;
    tape.add(c, scaled)
}

/// Training-time muting: independent Bernoulli(p) per block, one mask per
/// optimization step. `true` mutes the whole module for that block.
pub fn skip_mask(num_blocks: usize, p: f64, rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Contract(format!("skip probability {p} outside [0, 1]")));
    }
    Ok((0..num_blocks).map(|_| rng::uniform_f64(rng) < p).collect())
}

/// Constant per-block stack: `value` on the selected blocks, 0 elsewhere,
/// ignoring text features and timestep.
pub fn sparse_enhancement_stack(
    selected: &[usize],
    value: f64,
    num_blocks: usize,
) -> Result<Vec<f64>> {
    if !value.is_finite() || value.abs() >= 1.0 {
        return Err(Error::Config(format!(
            "enhancement value {value} outside the open interval (-1, 1)"
        )));
    }
    let mut stack = vec![0.0; num_blocks];
    for &l in selected {
        if l >= num_blocks {
            return Err(Error::Config(format!(
                "enhancement block index {l} out of range for {num_blocks} blocks"
            )));
        }
        stack[l] = value;
    }
    Ok(stack)
}

/// Standalone evaluation on a fresh tape; used by tools and bindings.
pub fn compute_alpha_values<S: Scalar>(
    aid: &AidParams<S>,
    block_index: usize,
    c0: &[S],
    text_len: usize,
    t: f64,
) -> Result<AlphaVector> {
    if block_index >= aid.num_blocks {
        return Err(Error::Contract(format!(
            "block index {block_index} out of range for {} blocks",
            aid.num_blocks
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("t = {t} outside [0, 1]")));
    }
    let d = aid.feature_dim;
    let mut tape = Tape::new();
    let ids = aid.bind(&mut tape, false)?;
    let c = tape.constant(c0.to_vec(), [text_len, d])?;
    let feats: Vec<S> = sinusoidal_features(t, d).into_iter().map(S::from_f64).collect();
    let tau = tape.constant(feats, [1, d])?;
    let alpha = compute_alpha(&mut tape, &ids.blocks[block_index], c, tau)?;
    Ok(AlphaVector {
        values: tape.data(alpha).iter().map(|x| x.to_f64() as f32).collect(),
        block_index,
        t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_blocks: 3,
            feature_dim: 8,
            num_heads: 2,
            text_len: 4,
            image_len: 6,
            vocab_size: 8,
            aid_hidden_dim: 4,
            seed: 0,
        }
    }

    #[test]
    fn zero_feature_weights_zero_alpha() {
        let c = cfg();
        let aid = AidParams::<f64>::init(&c, 7).unwrap();
        let c0 = vec![0.3; c.text_len * c.feature_dim];
        let a = compute_alpha_values(&aid, 1, &c0, c.text_len, 0.6).unwrap();
        assert_eq!(a.values, vec![0.0; c.text_len]);
        assert_eq!(a.block_index, 1);
    }

    #[test]
    fn saturated_branches_match_hand_evaluation() {
        // Zero W1/U with b2 = 10 makes both branch outputs exactly 10, so
        // alpha = tanh(10) * sigmoid(10) for every token.
        let c = cfg();
        let mut aid = AidParams::<f64>::init(&c, 7).unwrap();
        for branch in ["feat", "gate"] {
            for key in ["w1", "u", "w2"] {
                let i = aid.params.index_of(&format!("aid0.{branch}.{key}")).unwrap();
                aid.params.get_mut(i).data.fill(0.0);
            }
            let i = aid.params.index_of(&format!("aid0.{branch}.b2")).unwrap();
            aid.params.get_mut(i).data[0] = 10.0;
        }
        let c0 = vec![1.0; c.text_len * c.feature_dim];
        let a = compute_alpha_values(&aid, 0, &c0, c.text_len, 0.0).unwrap();
        // Direct evaluation of the product as the oracle.
        let expected = 10.0f64.tanh() * (1.0 / (1.0 + (-10.0f64).exp()));
        assert!((expected - 0.99995).abs() < 1e-5);
        for &v in &a.values {
            assert!((v as f64 - expected).abs() < 1e-7);
        }
    }

    #[test]
    fn bounded_over_random_draws() {
        // 10,000+ random (c, t, params) draws at working parameter scales;
        // every entry strictly in (-1, 1).
        let c = cfg();
        let mut r = rng::seeded(2024);
        let mut checked = 0usize;
        for trial in 0..900 {
            let mut aid = AidParams::<f32>::init(&c, trial).unwrap();
            for i in 0..aid.params.len() {
                let p = aid.params.get_mut(i);
                for x in p.data.iter_mut() {
                    *x += (rng::normal_f64(&mut r) * 0.3) as f32;
                }
            }
            let c0: Vec<f32> = (0..c.text_len * c.feature_dim)
                .map(|_| (rng::normal_f64(&mut r) * 1.5) as f32)
                .collect();
            let t = rng::uniform_f64(&mut r);
            for l in 0..c.num_blocks {
                let a = compute_alpha_values(&aid, l, &c0, c.text_len, t).unwrap();
                for &v in &a.values {
                    assert!(v > -1.0 && v < 1.0, "alpha {v} escaped (-1, 1)");
                    checked += 1;
                }
            }
        }
        assert!(checked >= 10_000, "only {checked} draws checked");
    }

    #[test]
    fn gate_drive_to_minus_infinity_silences_alpha() {
        // Holding the feature branch fixed, a strongly negative gate
        // pre-activation sends alpha to 0 entrywise.
        let c = cfg();
        let mut aid = AidParams::<f64>::init(&c, 3).unwrap();
        let fi = aid.params.index_of("aid0.feat.w2").unwrap();
        aid.params.get_mut(fi).data.fill(0.5);
        let c0 = vec![0.7; c.text_len * c.feature_dim];
        let base = compute_alpha_values(&aid, 0, &c0, c.text_len, 0.5).unwrap();
        assert!(base.values.iter().any(|&v| v.abs() > 1e-4));

        for (key, val) in [("w1", 0.0), ("u", 0.0), ("w2", 0.0), ("b2", -40.0)] {
            let i = aid.params.index_of(&format!("aid0.gate.{key}")).unwrap();
            aid.params.get_mut(i).data.fill(val);
        }
        let gated = compute_alpha_values(&aid, 0, &c0, c.text_len, 0.5).unwrap();
        for &v in &gated.values {
            assert!(v.abs() < 1e-10, "alpha {v} not silenced");
        }
    }

    #[test]
    fn modulation_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(vec![2.0, 4.0, -1.0, 3.0], [2, 2]).unwrap();

        // alpha = 0 is the identity.
        let zero = tape.constant(vec![0.0, 0.0], [2, 1]).unwrap();
        let same = apply_modulation(&mut tape, c, zero).unwrap();
        assert_eq!(tape.data(same), tape.data(c));

        // alpha_i = 0.5 scales row i by 1.5; alpha_i = -1 annihilates it.
        let a = tape.constant(vec![0.5, -1.0], [2, 1]).unwrap();
        let out = apply_modulation(&mut tape, c, a).unwrap();
        assert_eq!(tape.data(out), &[3.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn modulation_length_mismatch_errors() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(vec![1.0; 6], [3, 2]).unwrap();
        let a = tape.constant(vec![0.1, 0.2], [2, 1]).unwrap();
        let err = apply_modulation(&mut tape, c, a).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn skip_mask_endpoints_and_rate() {
        let mut r = rng::seeded(5);
        assert_eq!(skip_mask(6, 0.0, &mut r).unwrap(), vec![false; 6]);
        assert_eq!(skip_mask(6, 1.0, &mut r).unwrap(), vec![true; 6]);
        assert!(skip_mask(6, 1.5, &mut r).is_err());

        // Monte-Carlo: empirical rate within a generous binomial CI.
        let draws = 100_000usize;
        let mut hits = 0usize;
        for _ in 0..draws {
            if skip_mask(1, 0.1, &mut r).unwrap()[0] {
                hits += 1;
            }
        }
        let rate = hits as f64 / draws as f64;
        assert!((rate - 0.1).abs() < 0.01, "skip rate {rate}");
    }

    #[test]
    fn sparse_stack_layout() {
        let s = sparse_enhancement_stack(&[1, 3], 0.5, 5).unwrap();
        assert_eq!(s, vec![0.0, 0.5, 0.0, 0.5, 0.0]);
        assert_eq!(sparse_enhancement_stack(&[], 0.5, 3).unwrap(), vec![0.0; 3]);
        assert!(sparse_enhancement_stack(&[7], 0.5, 5).is_err());
        assert!(sparse_enhancement_stack(&[0], 1.0, 5).is_err());
        // The reference large-model selection is just a wider instance.
        let wide = sparse_enhancement_stack(&[1, 15, 36, 41, 48], 0.5, 57).unwrap();
        assert_eq!(wide.iter().filter(|&&v| v == 0.5).count(), 5);
        assert_eq!(wide.iter().filter(|&&v| v == 0.0).count(), 52);
    }

    proptest! {
        #[test]
        fn alpha_strictly_bounded(seed in 0u64..1000, t in 0.0f64..1.0) {
            let c = cfg();
            let mut r = rng::seeded(seed);
            let mut aid = AidParams::<f32>::init(&c, seed).unwrap();
            for i in 0..aid.params.len() {
                let p = aid.params.get_mut(i);
                for x in p.data.iter_mut() {
                    *x += (rng::normal_f64(&mut r) * 0.3) as f32;
                }
            }
            let c0: Vec<f32> = (0..c.text_len * c.feature_dim)
                .map(|_| (rng::normal_f64(&mut r) * 1.5) as f32)
                .collect();
            let a = compute_alpha_values(&aid, (seed % 3) as usize, &c0, c.text_len, t).unwrap();
            for &v in &a.values {
                prop_assert!(v > -1.0 && v < 1.0);
            }
        }

        #[test]
        fn mask_rate_zero_and_one_are_exact(len in 1usize..32, seed in 0u64..64) {
            let mut r = rng::seeded(seed);
            prop_assert!(skip_mask(len, 0.0, &mut r).unwrap().iter().all(|&b| !b));
            prop_assert!(skip_mask(len, 1.0, &mut r).unwrap().iter().all(|&b| b));
        }
    }
}
