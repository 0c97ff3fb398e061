//! Aggregations over captured coefficient and attention-norm traces:
//! distributions by block / token / timestep, block-timestep heatmaps,
//! enhancement-block selection, attention-norm curves.
//!
//! Every aggregate is a plain deterministic loop over the records in file
//! order, so re-running on the same traces is byte-identical.

use std::collections::BTreeMap;

use crate::model::AttentionNormSample;

/// Coefficients below this magnitude count as zero in sparsity summaries.
pub const ZERO_THRESHOLD: f64 = 0.01;

/// One captured coefficient, tagged with its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaRecord {
    pub run: String,
    pub block: usize,
    pub t: f64,
    pub token: usize,
    pub value: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Block,
    Token,
    Timestep,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Block => "block",
            Axis::Token => "token",
            Axis::Timestep => "timestep",
        }
    }
}

/// Per-bucket summary row.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionRow {
    pub axis_value: f64,
    pub count: usize,
    pub mean: f64,
    pub mean_abs: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
    pub zero_fraction: f64,
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

fn axis_key(axis: Axis, r: &AlphaRecord) -> f64 {
    match axis {
        Axis::Block => r.block as f64,
        Axis::Token => r.token as f64,
        Axis::Timestep => r.t,
    }
}

/// Bucket records by axis value (ascending) and summarize each bucket.
pub fn distribution_by(records: &[AlphaRecord], axis: Axis) -> Vec<DistributionRow> {
    let mut buckets: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let key = axis_key(axis, r);
        // Total order over the non-NaN keys via the IEEE bit trick.
        let bits = {
            let b = key.to_bits() as i64;
            (if b < 0 { i64::MIN - b } else { b }) as u64 ^ (1u64 << 63)
        };
        buckets
            .entry(bits)
            .or_insert_with(|| (key, Vec::new()))
            .1
            .push(r.value as f64);
    }
    buckets
        .into_values()
        .map(|(key, vals)| {
            let count = vals.len();
            let mut sum = 0.0;
            let mut sum_abs = 0.0;
            let mut zeros = 0usize;
            for &v in &vals {
                sum += v;
                sum_abs += v.abs();
                if v.abs() < ZERO_THRESHOLD {
                    zeros += 1;
                }
            }
            let mut sorted = vals;
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            DistributionRow {
                axis_value: key,
                count,
                mean: sum / count as f64,
                mean_abs: sum_abs / count as f64,
                q10: quantile_sorted(&sorted, 0.10),
                q50: quantile_sorted(&sorted, 0.50),
                q90: quantile_sorted(&sorted, 0.90),
                zero_fraction: zeros as f64 / count as f64,
            }
        })
        .collect()
}

/// Blocks-by-timesteps table of mean |alpha|; cells that were never
/// captured stay `None`, never silently zero.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTable {
    pub blocks: Vec<usize>,
    /// Grid timesteps, descending (trajectory order).
    pub ts: Vec<f64>,
    /// Row-major `blocks.len() x ts.len()`.
    pub cells: Vec<Option<f64>>,
}

impl HeatmapTable {
    pub fn cell(&self, block_row: usize, t_col: usize) -> Option<f64> {
        self.cells[block_row * self.ts.len() + t_col]
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }
}

pub fn block_timestep_heatmap(records: &[AlphaRecord]) -> HeatmapTable {
    let mut blocks: Vec<usize> = records.iter().map(|r| r.block).collect();
    blocks.sort_unstable();
    blocks.dedup();
    let mut ts: Vec<f64> = records.iter().map(|r| r.t).collect();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();

    let mut sums = vec![0.0f64; blocks.len() * ts.len()];
    let mut counts = vec![0usize; blocks.len() * ts.len()];
    for r in records {
        let bi = blocks.binary_search(&r.block).unwrap();
        let ti = ts
            .iter()
            .position(|&t| t == r.t)
            .expect("t listed above");
        sums[bi * ts.len() + ti] += (r.value as f64).abs();
        counts[bi * ts.len() + ti] += 1;
    }
    let cells = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { None } else { Some(s / c as f64) })
        .collect();
    HeatmapTable { blocks, ts, cells }
}

/// Top-k blocks by mean |alpha|; ties break toward the lower index.
pub fn select_enhancement_blocks(records: &[AlphaRecord], k: usize) -> Vec<usize> {
    let rows = distribution_by(records, Axis::Block);
    let mut ranked: Vec<(usize, f64)> = rows
        .iter()
        .map(|r| (r.axis_value as usize, r.mean_abs))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| a.0.cmp(&b.0))
    });
    let mut out: Vec<usize> = ranked.into_iter().take(k).map(|(b, _)| b).collect();
    out.sort_unstable();
    out
}

/// One point of the per-block attention-norm curve.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnCurvePoint {
    pub block: usize,
    pub t: f64,
    pub text_norm: f64,
    pub image_norm: f64,
}

/// Average samples per (block, t); sorted by block ascending, then t
/// descending (trajectory order).
pub fn attention_norm_curve(samples: &[AttentionNormSample]) -> Vec<AttnCurvePoint> {
    let mut keys: Vec<(usize, f64)> = samples.iter().map(|s| (s.block_index, s.t)).collect();
    keys.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.partial_cmp(&a.1).unwrap()));
    keys.dedup();
    keys.into_iter()
        .map(|(block, t)| {
            let mut text = 0.0;
            let mut image = 0.0;
            let mut count = 0usize;
            for s in samples {
                if s.block_index == block && s.t == t {
                    text += s.text_norm;
                    image += s.image_norm;
                    count += 1;
                }
            }
            AttnCurvePoint {
                block,
                t,
                text_norm: text / count as f64,
                image_norm: image / count as f64,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(block: usize, t: f64, token: usize, value: f32) -> AlphaRecord {
        AlphaRecord {
            run: "test".into(),
            block,
            t,
            token,
            value,
        }
    }

    #[test]
    fn block_ranking_by_mean_abs() {
        let mut records = Vec::new();
        for _ in 0..5 {
            records.push(rec(0, 1.0, 0, 0.3));
            records.push(rec(1, 1.0, 0, 0.0));
        }
        let rows = distribution_by(&records, Axis::Block);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].axis_value, 0.0);
        assert!(rows[0].mean_abs > rows[1].mean_abs);
        assert_eq!(rows[1].zero_fraction, 1.0);
    }

    #[test]
    fn all_zero_records_have_unit_zero_fraction() {
        let records: Vec<AlphaRecord> = (0..10).map(|i| rec(i % 3, 0.5, i, 0.0)).collect();
        for axis in [Axis::Block, Axis::Token, Axis::Timestep] {
            for row in distribution_by(&records, axis) {
                assert_eq!(row.zero_fraction, 1.0);
                assert_eq!(row.mean, 0.0);
            }
        }
    }

    #[test]
    fn aggregates_match_naive_recomputation_exactly() {
        let mut records = Vec::new();
        let vals = [0.31f32, -0.02, 0.77, 0.0, -0.4, 0.11, 0.05, -0.91];
        for (i, &v) in vals.iter().enumerate() {
            records.push(rec(i % 2, 1.0 - (i / 2) as f64 * 0.25, i % 4, v));
        }
        for axis in [Axis::Block, Axis::Token, Axis::Timestep] {
            let rows = distribution_by(&records, axis);
            for row in &rows {
                // Naive per-bucket loop, recomputed independently.
                let bucket: Vec<f64> = records
                    .iter()
                    .filter(|r| axis_key(axis, r) == row.axis_value)
                    .map(|r| r.value as f64)
                    .collect();
                let mean: f64 = bucket.iter().sum::<f64>() / bucket.len() as f64;
                let mean_abs: f64 =
                    bucket.iter().map(|v| v.abs()).sum::<f64>() / bucket.len() as f64;
                let zeros =
                    bucket.iter().filter(|v| v.abs() < ZERO_THRESHOLD).count() as f64;
                assert_eq!(row.count, bucket.len());
                assert_eq!(row.mean, mean);
                assert_eq!(row.mean_abs, mean_abs);
                assert_eq!(row.zero_fraction, zeros / bucket.len() as f64);
                let mut sorted = bucket;
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                assert_eq!(row.q50, quantile_sorted(&sorted, 0.5));
            }
        }
    }

    #[test]
    fn heatmap_shape_and_missing_cells() {
        let mut records = Vec::new();
        for block in 0..2 {
            for step in 0..3 {
                let t = 1.0 - step as f64 / 3.0;
                records.push(rec(block, t, 0, 0.5));
            }
        }
        let table = block_timestep_heatmap(&records);
        assert_eq!(table.num_cells(), 6);
        assert!(table.cells.iter().all(|c| *c == Some(0.5)));

        // Remove one (block, t) pair entirely: that cell is flagged absent.
        let partial: Vec<AlphaRecord> = records
            .iter()
            .filter(|r| !(r.block == 1 && r.t == 1.0))
            .cloned()
            .collect();
        let table = block_timestep_heatmap(&partial);
        assert_eq!(table.num_cells(), 6);
        assert_eq!(table.cell(1, 0), None);
        assert_eq!(table.cell(0, 0), Some(0.5));
    }

    #[test]
    fn selection_top_k_and_tie_break() {
        let mut records = Vec::new();
        for (block, v) in [(0usize, 0.1f32), (1, 0.9), (2, 0.5), (3, 0.7)] {
            records.push(rec(block, 1.0, 0, v));
        }
        assert_eq!(select_enhancement_blocks(&records, 2), vec![1, 3]);

        // All means equal: the k lowest indices win.
        let ties: Vec<AlphaRecord> = (0..5).map(|b| rec(b, 1.0, 0, 0.25)).collect();
        assert_eq!(select_enhancement_blocks(&ties, 3), vec![0, 1, 2]);
    }

    #[test]
    fn attention_curve_ordering_and_averaging() {
        let samples = vec![
            AttentionNormSample {
                block_index: 1,
                t: 0.5,
                text_norm: 2.0,
                image_norm: 4.0,
            },
            AttentionNormSample {
                block_index: 0,
                t: 1.0,
                text_norm: 1.0,
                image_norm: 3.0,
            },
            AttentionNormSample {
                block_index: 1,
                t: 0.5,
                text_norm: 4.0,
                image_norm: 8.0,
            },
            AttentionNormSample {
                block_index: 0,
                t: 0.5,
                text_norm: 5.0,
                image_norm: 6.0,
            },
        ];
        let curve = attention_norm_curve(&samples);
        assert_eq!(curve.len(), 3);
        // Block ascending, t descending within a block.
        assert_eq!((curve[0].block, curve[0].t), (0, 1.0));
        assert_eq!((curve[1].block, curve[1].t), (0, 0.5));
        assert_eq!((curve[2].block, curve[2].t), (1, 0.5));
        // Duplicates average.
        assert_eq!(curve[2].text_norm, 3.0);
        assert_eq!(curve[2].image_norm, 6.0);
        assert!(curve.iter().all(|p| p.text_norm >= 0.0 && p.image_norm >= 0.0));
    }

    #[test]
    fn single_sample_yields_single_point() {
        let samples = vec![AttentionNormSample {
            block_index: 2,
            t: 0.25,
            text_norm: 1.5,
            image_norm: 0.5,
        }];
        let curve = attention_norm_curve(&samples);
        assert_eq!(curve.len(), 1);
        assert_eq!(curve[0].block, 2);
    }
}
