//! Synthetic token-conditioned generation task with exact adherence rules,
//! plus preference-pair construction.
//!
//! A sample is a g x g grid of small-integer codes. Two attributes are
//! prompted: the color code painted onto marked cells and how many cells
//! are marked (always a prefix in scan order). Each cell also carries a
//! seeded two-level texture code that the adherence rules never read; it
//! is the nuisance axis of the data distribution.
//!
//! The latent codec is a fixed linear map: channel 0 of each token holds
//! the quantized color level, channel 1 the texture level. Decoding clamps
//! and re-quantizes, so it round-trips exactly and is 1-Lipschitz in the
//! max norm.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TokenSequence};
use crate::objectives::{CorruptedAttribute, PreferencePair};
use crate::rng;
use crate::scalar::Scalar;

/// Grid-cell code vocabulary (shared with the prompt-token vocabulary size).
pub const CODE_VOCAB: usize = 16;
/// Background cells carry code 0.
pub const BG_CODE: u8 = 0;
/// Color codes are 1..=NUM_COLORS.
pub const NUM_COLORS: u8 = 6;
/// Counts range over 1..=NUM_COUNTS marked cells.
pub const NUM_COUNTS: u8 = 4;

// Prompt-token ids. Attribute tokens precede the PAD tail.
pub const PAD_TOKEN: u32 = 0;
pub const NULL_TOKEN: u32 = 1;
pub const COLOR_TOKEN_BASE: u32 = 2; // 2..=7
pub const COUNT_TOKEN_BASE: u32 = 8; // 8..=11

/// Latent channel carrying the color level.
const LEVEL_CHANNEL: usize = 0;
/// Latent channel carrying the texture level.
const TEXTURE_CHANNEL: usize = 1;
/// Latent-space gain of the level channel. It widens the quantizer's
/// error budget and makes the squared-error objective weight the
/// semantic channel above the inert ones.
const LEVEL_AMPLITUDE: f64 = 3.0;
const TEXTURE_AMPLITUDE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyGrid {
    pub side: usize,
    /// Cell codes, row-major, each < CODE_VOCAB.
    pub codes: Vec<u8>,
    /// Nuisance texture codes in {0, 1}, same layout.
    pub texture: Vec<u8>,
}

impl ToyGrid {
    pub fn cells(&self) -> usize {
        self.side * self.side
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyPrompt {
    /// Color attribute in 0..NUM_COLORS (painted as code 1 + color).
    pub color: u8,
    /// Count attribute in 1..=NUM_COUNTS.
    pub count: u8,
    pub tokens: TokenSequence,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdherenceReport {
    pub color_ok: bool,
    pub count_ok: bool,
    /// Mean of the per-attribute booleans.
    pub accuracy: f64,
}

/// Codes the renderer can paint: background plus the color alphabet.
pub const RENDER_CODES: usize = 1 + NUM_COLORS as usize;

/// Centered level of a renderable cell code on (-1, 1).
pub fn code_level(code: u8) -> f64 {
    -1.0 + (2.0 * code as f64 + 1.0) / RENDER_CODES as f64
}

fn quantize_level(level: f64) -> u8 {
    let clamped = level.clamp(-1.0, 1.0);
    let idx = ((clamped + 1.0) * RENDER_CODES as f64 / 2.0 - 0.5).round();
    (idx.clamp(0.0, (RENDER_CODES - 1) as f64)) as u8
}

fn texture_level(code: u8) -> f64 {
    if code == 0 {
        -TEXTURE_AMPLITUDE
    } else {
        TEXTURE_AMPLITUDE
    }
}

pub fn prompt_tokens(color: u8, count: u8, text_len: usize) -> TokenSequence {
    let mut ids = vec![
        COLOR_TOKEN_BASE + color as u32,
        COUNT_TOKEN_BASE + (count - 1) as u32,
    ];
    ids.resize(text_len, PAD_TOKEN);
    TokenSequence::new(ids)
}

/// The reserved unconditional sequence used for guidance.
pub fn null_tokens(text_len: usize) -> TokenSequence {
    TokenSequence::new(vec![NULL_TOKEN; text_len])
}

pub fn make_prompt(color: u8, count: u8, text_len: usize) -> Result<ToyPrompt> {
    if color >= NUM_COLORS {
        return Err(Error::Config(format!(
            "color {color} out of range 0..{NUM_COLORS}"
        )));
    }
    if count == 0 || count > NUM_COUNTS {
        return Err(Error::Config(format!(
            "count {count} out of range 1..={NUM_COUNTS}"
        )));
    }
    if text_len < 2 {
        return Err(Error::Config("text_len must be >= 2 for two attributes".into()));
    }
    Ok(ToyPrompt {
        color,
        count,
        tokens: prompt_tokens(color, count, text_len),
    })
}

/// Render the grid a prompt describes: the first `count` cells in scan
/// order carry the color code, the rest background. Texture is seeded
/// nuisance the rules never reference.
pub fn render(prompt: &ToyPrompt, side: usize, texture_rng: &mut ChaCha8Rng) -> ToyGrid {
    let cells = side * side;
    let mut codes = vec![BG_CODE; cells];
    for cell in codes.iter_mut().take(prompt.count as usize) {
        *cell = 1 + prompt.color;
    }
    let texture = (0..cells).map(|_| texture_rng.gen_range(0..2u8)).collect();
    ToyGrid {
        side,
        codes,
        texture,
    }
}

/// Exact rule evaluation; deterministic given grid and prompt.
pub fn adherence(prompt: &ToyPrompt, grid: &ToyGrid) -> AdherenceReport {
    let marked: Vec<u8> = grid
        .codes
        .iter()
        .copied()
        .filter(|&c| c != BG_CODE)
        .collect();
    let target = 1 + prompt.color;
    let color_ok = !marked.is_empty() && marked.iter().all(|&c| c == target);
    let count_ok = marked.len() == prompt.count as usize;
    let hits = color_ok as u8 + count_ok as u8;
    AdherenceReport {
        color_ok,
        count_ok,
        accuracy: hits as f64 / 2.0,
    }
}

/// Uniform attribute draws plus seeded nuisance; deterministic per seed.
pub fn generate_dataset(size: usize, seed: u64, cfg: &ModelConfig, side: usize) -> Result<Vec<(ToyPrompt, ToyGrid)>> {
    if side * side != cfg.image_len {
        return Err(Error::Config(format!(
            "grid side {side} squared != image_len {}",
            cfg.image_len
        )));
    }
    let mut r = rng::seeded(rng::derive(seed, 0x6461_7461)); // "data"
    let mut out = Vec::with_capacity(size);
    for _ in 0..size {
        let color = r.gen_range(0..NUM_COLORS);
        let count = 1 + r.gen_range(0..NUM_COUNTS);
        let prompt = make_prompt(color, count, cfg.text_len)?;
        let grid = render(&prompt, side, &mut r);
        out.push((prompt, grid));
    }
    Ok(out)
}

/// Distinct evaluation prompts cycling over all attribute combinations.
pub fn eval_prompts(n: usize, cfg: &ModelConfig) -> Result<Vec<ToyPrompt>> {
    let mut out = Vec::with_capacity(n);
    let combos = NUM_COLORS as usize * NUM_COUNTS as usize;
    for i in 0..n {
        let k = i % combos;
        let color = (k / NUM_COUNTS as usize) as u8;
        let count = 1 + (k % NUM_COUNTS as usize) as u8;
        out.push(make_prompt(color, count, cfg.text_len)?);
    }
    Ok(out)
}

/// Winner = the rule-correct grid; loser = the same grid re-rendered with
/// exactly one attribute corrupted, under the same nuisance texture.
pub fn make_preference_pairs(
    dataset: &[(ToyPrompt, ToyGrid)],
    seed: u64,
    cfg: &ModelConfig,
) -> Result<Vec<PreferencePair>> {
    let mut r = rng::seeded(rng::derive(seed, 0x7061_6972)); // "pair"
    let d = cfg.feature_dim;
    let mut out = Vec::with_capacity(dataset.len());
    for (prompt, grid) in dataset {
        let corrupt_color = r.gen_range(0..2u8) == 0;
        let (bad_prompt, corrupted) = if corrupt_color {
            let mut color = r.gen_range(0..NUM_COLORS);
            if color == prompt.color {
                color = (color + 1) % NUM_COLORS;
            }
            (
                make_prompt(color, prompt.count, prompt.tokens.len())?,
                CorruptedAttribute::Color,
            )
        } else {
            // Keep the corrupted count at distance >= 2 so the loser grid
            // differs on at least two cells; distance-1 pairs are near
            // ties that carry no usable preference signal.
            let far: Vec<u8> = (1..=NUM_COUNTS)
                .filter(|&k| (k as i8 - prompt.count as i8).abs() >= 2)
                .collect();
            let count = far[r.gen_range(0..far.len())];
            (
                make_prompt(prompt.color, count, prompt.tokens.len())?,
                CorruptedAttribute::Count,
            )
        };
        let mut loser = ToyGrid {
            side: grid.side,
            codes: vec![BG_CODE; grid.cells()],
            texture: grid.texture.clone(),
        };
        for cell in loser.codes.iter_mut().take(bad_prompt.count as usize) {
            *cell = 1 + bad_prompt.color;
        }
        out.push(PreferencePair {
            tokens: prompt.tokens.clone(),
            winner_latent: encode::<f32>(grid, d)?,
            loser_latent: encode::<f32>(&loser, d)?,
            winner_grid: grid.clone(),
            loser_grid: loser,
            corrupted,
        });
    }
    Ok(out)
}

// ── Fixed linear codec ──────────────────────────────────────────────

/// Grid -> `M x d` latent tokens. Channel 0 carries the color level,
/// channel 1 the texture level, all other channels are zero.
pub fn encode<S: Scalar>(grid: &ToyGrid, d: usize) -> Result<Vec<S>> {
    if d < 2 {
        return Err(Error::Config("codec needs feature_dim >= 2".into()));
    }
    let m = grid.cells();
    let mut out = vec![S::ZERO; m * d];
    for i in 0..m {
        if grid.codes[i] as usize >= RENDER_CODES {
            return Err(Error::Contract(format!(
                "grid code {} outside the renderable alphabet {RENDER_CODES}",
                grid.codes[i]
            )));
        }
        out[i * d + LEVEL_CHANNEL] = S::from_f64(code_level(grid.codes[i]) * LEVEL_AMPLITUDE);
        out[i * d + TEXTURE_CHANNEL] = S::from_f64(texture_level(grid.texture[i]));
    }
    Ok(out)
}

/// Latent tokens -> real-valued per-cell levels (clamped projection).
/// This stage is 1-Lipschitz in the max norm by construction.
pub fn decode_levels<S: Scalar>(latent: &[S], d: usize, cells: usize) -> Vec<f64> {
    (0..cells)
        .map(|i| (latent[i * d + LEVEL_CHANNEL].to_f64() / LEVEL_AMPLITUDE).clamp(-1.0, 1.0))
        .collect()
}

/// Latent tokens -> grid, quantizing levels back to codes.
pub fn decode<S: Scalar>(latent: &[S], d: usize, side: usize) -> Result<ToyGrid> {
    let cells = side * side;
    if latent.len() != cells * d {
        return Err(Error::Contract(format!(
            "latent length {} != {cells} cells x {d} features",
            latent.len()
        )));
    }
    let codes = decode_levels(latent, d, cells)
        .into_iter()
        .map(quantize_level)
        .collect();
    let texture = (0..cells)
        .map(|i| {
            if latent[i * d + TEXTURE_CHANNEL].to_f64() >= 0.0 {
                1
            } else {
                0
            }
        })
        .collect();
    Ok(ToyGrid {
        side,
        codes,
        texture,
    })
}

/// The decoded image of the zero latent.
pub fn neutral_grid(side: usize) -> ToyGrid {
    let d = 2;
    let zero = vec![0.0f32; side * side * d];
    decode(&zero, d, side).expect("zero latent decodes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn dataset_is_deterministic_and_rule_correct() {
        let c = cfg();
        let a = generate_dataset(64, 9, &c, 4).unwrap();
        let b = generate_dataset(64, 9, &c, 4).unwrap();
        assert_eq!(a, b);
        for (prompt, grid) in &a {
            let rep = adherence(prompt, grid);
            assert_eq!(rep.accuracy, 1.0);
            // Attribute tokens precede the PAD tail.
            assert!(prompt.tokens.ids[0] >= COLOR_TOKEN_BASE && prompt.tokens.ids[0] < COUNT_TOKEN_BASE);
            assert!(prompt.tokens.ids[1] >= COUNT_TOKEN_BASE);
            assert!(prompt.tokens.ids[2..].iter().all(|&t| t == PAD_TOKEN));
        }
    }

    #[test]
    fn attribute_marginals_are_uniform() {
        let c = cfg();
        let data = generate_dataset(10_000, 11, &c, 4).unwrap();
        let mut color_counts = [0usize; NUM_COLORS as usize];
        let mut count_counts = [0usize; NUM_COUNTS as usize];
        for (p, _) in &data {
            color_counts[p.color as usize] += 1;
            count_counts[(p.count - 1) as usize] += 1;
        }
        for &c in &color_counts {
            let frac = c as f64 / 10_000.0;
            assert!((frac - 1.0 / NUM_COLORS as f64).abs() < 0.02, "color frac {frac}");
        }
        for &c in &count_counts {
            let frac = c as f64 / 10_000.0;
            assert!((frac - 1.0 / NUM_COUNTS as f64).abs() < 0.02, "count frac {frac}");
        }
    }

    #[test]
    fn adherence_cases() {
        let c = cfg();
        let p = make_prompt(2, 3, c.text_len).unwrap();
        let mut r = rng::seeded(1);
        let grid = render(&p, 4, &mut r);
        assert_eq!(adherence(&p, &grid).accuracy, 1.0);

        // One wrong attribute scores 0.5.
        let mut wrong_color = grid.clone();
        for cell in wrong_color.codes.iter_mut().filter(|c| **c != BG_CODE) {
            *cell = 5;
        }
        let rep = adherence(&p, &wrong_color);
        assert!(!rep.color_ok && rep.count_ok);
        assert_eq!(rep.accuracy, 0.5);

        // Fully corrupted grid scores 0 on both attributes.
        let empty = ToyGrid {
            side: 4,
            codes: vec![BG_CODE; 16],
            texture: grid.texture.clone(),
        };
        let rep = adherence(&p, &empty);
        assert!(!rep.color_ok && !rep.count_ok);
        assert_eq!(rep.accuracy, 0.0);
    }

    #[test]
    fn adherence_ignores_texture_nuisance() {
        let c = cfg();
        let p = make_prompt(1, 2, c.text_len).unwrap();
        let mut r = rng::seeded(2);
        let g1 = render(&p, 4, &mut r);
        let mut g2 = g1.clone();
        for t in g2.texture.iter_mut() {
            *t = 1 - *t;
        }
        assert_eq!(adherence(&p, &g1), adherence(&p, &g2));
    }

    #[test]
    fn preference_pairs_are_single_attribute_corruptions() {
        let c = cfg();
        let data = generate_dataset(128, 5, &c, 4).unwrap();
        let pairs = make_preference_pairs(&data, 6, &c).unwrap();
        assert_eq!(pairs.len(), data.len());
        for (pair, (prompt, _)) in pairs.iter().zip(&data) {
            let win = adherence(prompt, &pair.winner_grid);
            let lose = adherence(prompt, &pair.loser_grid);
            assert!(win.accuracy > lose.accuracy);
            assert_eq!(win.accuracy, 1.0);
            assert_eq!(lose.accuracy, 0.5);
            // Hamming distance on the (color, count) attribute vector is 1.
            match pair.corrupted {
                CorruptedAttribute::Color => assert!(!lose.color_ok && lose.count_ok),
                CorruptedAttribute::Count => assert!(lose.color_ok && !lose.count_ok),
            }
            // The nuisance texture is shared between the two grids.
            assert_eq!(pair.winner_grid.texture, pair.loser_grid.texture);
        }
    }

    #[test]
    fn codec_round_trips_exactly() {
        let c = cfg();
        let data = generate_dataset(32, 3, &c, 4).unwrap();
        for (_, grid) in &data {
            let latent = encode::<f32>(grid, c.feature_dim).unwrap();
            let back = decode(&latent, c.feature_dim, 4).unwrap();
            assert_eq!(&back, grid);
        }
    }

    #[test]
    fn zero_latent_decodes_to_the_neutral_grid() {
        let c = cfg();
        let zero = vec![0.0f32; 16 * c.feature_dim];
        let g = decode(&zero, c.feature_dim, 4).unwrap();
        assert_eq!(g, neutral_grid(4));
        // Level 0 sits exactly between codes 7 and 8; the quantizer is
        // deterministic about the tie.
        assert!(g.codes.iter().all(|&x| x == g.codes[0]));
    }

    #[test]
    fn decode_is_one_lipschitz_in_max_norm() {
        let c = cfg();
        let mut r = rng::seeded(13);
        let d = c.feature_dim;
        for _ in 0..200 {
            let a: Vec<f32> = (0..16 * d).map(|_| (r.gen::<f32>() - 0.5) * 4.0).collect();
            let b: Vec<f32> = (0..16 * d).map(|_| (r.gen::<f32>() - 0.5) * 4.0).collect();
            let la = decode_levels(&a, d, 16);
            let lb = decode_levels(&b, d, 16);
            let input_gap = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y).abs() as f64)
                .fold(0.0, f64::max);
            let output_gap = la
                .iter()
                .zip(&lb)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(output_gap <= input_gap + 1e-12);
        }
    }

    #[test]
    fn quantizer_hits_exact_levels() {
        for code in 0..RENDER_CODES as u8 {
            assert_eq!(quantize_level(code_level(code)), code);
        }
    }
}
