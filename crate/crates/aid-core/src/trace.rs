//! Trace and table files: coefficient traces, attention-norm traces,
//! trajectories, datasets, and the analytics CSV outputs. Every file
//! begins with a magic string and format version; trace files carry a
//! record-count footer that readers verify. Writes go through a
//! write-temp-then-rename barrier.

use std::fs;
use std::path::Path;

use crate::analytics::{AlphaRecord, AttnCurvePoint, Axis, DistributionRow, HeatmapTable};
use crate::error::{Error, Result};
use crate::model::AttentionNormSample;
use crate::toydata::{ToyGrid, ToyPrompt};

pub const ALPHA_TRACE_MAGIC: &str = "# aid-trace v1 alpha";
pub const ATTN_TRACE_MAGIC: &str = "# aid-trace v1 attn";
pub const TRAJECTORY_MAGIC: &str = "# aid-trajectory v1";
pub const DATASET_MAGIC: &str = "# aid-dataset v1";
pub const GRID_MAGIC: &str = "# aid-grid v1";
pub const CSV_MAGIC_PREFIX: &str = "# aid-csv v1";

/// Write-temp-then-rename; the visible file is always complete.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn lines_of(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn check_footer(path: &Path, lines: &[String], body: usize) -> Result<()> {
    let footer = lines
        .last()
        .ok_or_else(|| Error::format(path, "empty trace file".to_string()))?;
    let expected = format!("# records = {body}");
    if footer != &expected {
        return Err(Error::format(
            path,
            format!("record-count footer `{footer}` does not match {body} body records"),
        ));
    }
    Ok(())
}

// ── Coefficient traces ──────────────────────────────────────────────

pub fn write_alpha_trace(path: &Path, run: &str, records: &[AlphaRecord]) -> Result<()> {
    let mut s = String::new();
    s.push_str(ALPHA_TRACE_MAGIC);
    s.push('\n');
    s.push_str(&format!("run = {run}\n"));
    s.push_str("columns = block,t,token,value\n");
    for r in records {
        s.push_str(&format!("{},{},{},{}\n", r.block, r.t, r.token, r.value));
    }
    s.push_str(&format!("# records = {}\n", records.len()));
    write_atomic(path, s.as_bytes())
}

pub fn read_alpha_trace(path: &Path) -> Result<Vec<AlphaRecord>> {
    let lines = lines_of(path)?;
    if lines.first().map(String::as_str) != Some(ALPHA_TRACE_MAGIC) {
        return Err(Error::format(path, "not an alpha trace".to_string()));
    }
    let run = lines
        .get(1)
        .and_then(|l| l.strip_prefix("run = "))
        .ok_or_else(|| Error::format(path, "missing run header".to_string()))?
        .to_string();
    let body = &lines[3..lines.len() - 1];
    check_footer(path, &lines, body.len())?;
    body.iter()
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::format(path, format!("bad alpha row `{line}`")));
            }
            Ok(AlphaRecord {
                run: run.clone(),
                block: f[0]
                    .parse()
                    .map_err(|_| Error::format(path, format!("bad block `{}`", f[0])))?,
                t: f[1]
                    .parse()
                    .map_err(|_| Error::format(path, format!("bad t `{}`", f[1])))?,
                token: f[2]
                    .parse()
                    .map_err(|_| Error::format(path, format!("bad token `{}`", f[2])))?,
                value: f[3]
                    .parse()
                    .map_err(|_| Error::format(path, format!("bad value `{}`", f[3])))?,
            })
        })
        .collect()
}

// ── Attention-norm traces ───────────────────────────────────────────

pub fn write_attn_trace(path: &Path, run: &str, samples: &[AttentionNormSample]) -> Result<()> {
    let mut s = String::new();
    s.push_str(ATTN_TRACE_MAGIC);
    s.push('\n');
    s.push_str(&format!("run = {run}\n"));
    s.push_str("columns = block,t,text_norm,image_norm\n");
    for r in samples {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.block_index, r.t, r.text_norm, r.image_norm
        ));
    }
    s.push_str(&format!("# records = {}\n", samples.len()));
    write_atomic(path, s.as_bytes())
}

pub fn read_attn_trace(path: &Path) -> Result<Vec<AttentionNormSample>> {
    let lines = lines_of(path)?;
    if lines.first().map(String::as_str) != Some(ATTN_TRACE_MAGIC) {
        return Err(Error::format(path, "not an attention-norm trace".to_string()));
    }
    let body = &lines[3..lines.len() - 1];
    check_footer(path, &lines, body.len())?;
    body.iter()
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::format(path, format!("bad attn row `{line}`")));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::format(path, format!("bad number `{s}`")))
            };
            Ok(AttentionNormSample {
                block_index: f[0]
                    .parse()
                    .map_err(|_| Error::format(path, format!("bad block `{}`", f[0])))?,
                t: num(f[1])?,
                text_norm: num(f[2])?,
                image_norm: num(f[3])?,
            })
        })
        .collect()
}

// ── Trajectories ────────────────────────────────────────────────────

pub fn write_trajectory(path: &Path, states: &[(f64, Vec<f32>)]) -> Result<()> {
    let mut s = String::new();
    s.push_str(TRAJECTORY_MAGIC);
    s.push('\n');
    s.push_str("columns = step,t,latent...\n");
    for (i, (t, z)) in states.iter().enumerate() {
        s.push_str(&format!("{i},{t}"));
        for v in z {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s.push_str(&format!("# records = {}\n", states.len()));
    write_atomic(path, s.as_bytes())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, Vec<f32>)>> {
    let lines = lines_of(path)?;
    if lines.first().map(String::as_str) != Some(TRAJECTORY_MAGIC) {
        return Err(Error::format(path, "not a trajectory file".to_string()));
    }
    let body = &lines[2..lines.len() - 1];
    check_footer(path, &lines, body.len())?;
    body.iter()
        .map(|line| {
            let mut f = line.split(',');
            let _step = f.next();
            let t: f64 = f
                .next()
                .ok_or_else(|| Error::format(path, "short trajectory row".to_string()))?
                .parse()
                .map_err(|_| Error::format(path, "bad t".to_string()))?;
            let z: std::result::Result<Vec<f32>, _> = f.map(str::parse).collect();
            Ok((
                t,
                z.map_err(|_| Error::format(path, "bad latent value".to_string()))?,
            ))
        })
        .collect()
}

// ── Datasets ────────────────────────────────────────────────────────

fn hex_digit(v: u8) -> char {
    char::from_digit(v as u32, 16).expect("code < 16")
}

pub fn write_dataset(path: &Path, data: &[(ToyPrompt, ToyGrid)]) -> Result<()> {
    let mut s = String::new();
    s.push_str(DATASET_MAGIC);
    s.push('\n');
    s.push_str("columns = color,count,codes_hex,texture_bits\n");
    for (prompt, grid) in data {
        let codes: String = grid.codes.iter().map(|&c| hex_digit(c)).collect();
        let texture: String = grid
            .texture
            .iter()
            .map(|&t| if t == 0 { '0' } else { '1' })
            .collect();
        s.push_str(&format!("{},{},{codes},{texture}\n", prompt.color, prompt.count));
    }
    s.push_str(&format!("# records = {}\n", data.len()));
    write_atomic(path, s.as_bytes())
}

pub fn read_dataset(path: &Path, text_len: usize, side: usize) -> Result<Vec<(ToyPrompt, ToyGrid)>> {
    let lines = lines_of(path)?;
    if lines.first().map(String::as_str) != Some(DATASET_MAGIC) {
        return Err(Error::format(path, "not a dataset file".to_string()));
    }
    let body = &lines[2..lines.len() - 1];
    check_footer(path, &lines, body.len())?;
    body.iter()
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::format(path, format!("bad dataset row `{line}`")));
            }
            let color: u8 = f[0]
                .parse()
                .map_err(|_| Error::format(path, "bad color".to_string()))?;
            let count: u8 = f[1]
                .parse()
                .map_err(|_| Error::format(path, "bad count".to_string()))?;
            let codes: Option<Vec<u8>> = f[2]
                .chars()
                .map(|c| c.to_digit(16).map(|d| d as u8))
                .collect();
            let texture: Option<Vec<u8>> = f[3]
                .chars()
                .map(|c| match c {
                    '0' => Some(0),
                    '1' => Some(1),
                    _ => None,
                })
                .collect();
            let (Some(codes), Some(texture)) = (codes, texture) else {
                return Err(Error::format(path, format!("bad grid encoding `{line}`")));
            };
            if codes.len() != side * side || texture.len() != side * side {
                return Err(Error::format(path, "grid size mismatch".to_string()));
            }
            let prompt = crate::toydata::make_prompt(color, count, text_len)?;
            Ok((
                prompt,
                ToyGrid {
                    side,
                    codes,
                    texture,
                },
            ))
        })
        .collect()
}

// ── Decoded grids ───────────────────────────────────────────────────

pub fn render_grid_file(grid: &ToyGrid, adherence: Option<&crate::toydata::AdherenceReport>) -> String {
    let mut s = String::new();
    s.push_str(GRID_MAGIC);
    s.push('\n');
    s.push_str(&format!("side = {}\n", grid.side));
    let codes: String = grid.codes.iter().map(|&c| hex_digit(c)).collect();
    let texture: String = grid
        .texture
        .iter()
        .map(|&t| if t == 0 { '0' } else { '1' })
        .collect();
    s.push_str(&format!("codes = {codes}\n"));
    s.push_str(&format!("texture = {texture}\n"));
    if let Some(rep) = adherence {
        s.push_str(&format!("color_ok = {}\n", rep.color_ok));
        s.push_str(&format!("count_ok = {}\n", rep.count_ok));
        s.push_str(&format!("accuracy = {}\n", rep.accuracy));
    }
    s
}

// ── Analytics CSV files ─────────────────────────────────────────────

pub fn render_distribution_csv(axis: Axis, rows: &[DistributionRow]) -> String {
    let mut s = format!("{CSV_MAGIC_PREFIX} alpha_by_{} mean/mean_abs/quantiles/zero_fraction\n", axis.name());
    s.push_str(&format!(
        "{},count,mean,mean_abs,q10,q50,q90,zero_fraction\n",
        axis.name()
    ));
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.axis_value, r.count, r.mean, r.mean_abs, r.q10, r.q50, r.q90, r.zero_fraction
        ));
    }
    s
}

pub fn render_heatmap_csv(table: &HeatmapTable) -> String {
    let mut s = format!("{CSV_MAGIC_PREFIX} alpha_heatmap mean_abs per block x timestep\n");
    s.push_str("block,step_index,t,mean_abs\n");
    for (bi, &block) in table.blocks.iter().enumerate() {
        for (ti, &t) in table.ts.iter().enumerate() {
            match table.cell(bi, ti) {
                Some(v) => s.push_str(&format!("{block},{ti},{t},{v}\n")),
                None => s.push_str(&format!("{block},{ti},{t},NA\n")),
            }
        }
    }
    s
}

pub fn parse_heatmap_csv(text: &str) -> Result<HeatmapTable> {
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or_default();
    if !magic.starts_with(CSV_MAGIC_PREFIX) {
        return Err(Error::Contract(format!("bad heatmap magic `{magic}`")));
    }
    let _header = lines.next();
    let mut blocks: Vec<usize> = Vec::new();
    let mut ts: Vec<f64> = Vec::new();
    let mut cells_raw: Vec<(usize, usize, Option<f64>)> = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Contract(format!("bad heatmap row `{line}`")));
        }
        let block: usize = f[0]
            .parse()
            .map_err(|_| Error::Contract(format!("bad block `{}`", f[0])))?;
        let step: usize = f[1]
            .parse()
            .map_err(|_| Error::Contract(format!("bad step `{}`", f[1])))?;
        let t: f64 = f[2]
            .parse()
            .map_err(|_| Error::Contract(format!("bad t `{}`", f[2])))?;
        let v = if f[3] == "NA" {
            None
        } else {
            Some(
                f[3].parse()
                    .map_err(|_| Error::Contract(format!("bad cell `{}`", f[3])))?,
            )
        };
        if !blocks.contains(&block) {
            blocks.push(block);
        }
        if step >= ts.len() {
            ts.resize(step + 1, f64::NAN);
        }
        ts[step] = t;
        cells_raw.push((block, step, v));
    }
    blocks.sort_unstable();
    let mut cells = vec![None; blocks.len() * ts.len()];
    for (block, step, v) in cells_raw {
        let bi = blocks.binary_search(&block).unwrap();
        cells[bi * ts.len() + step] = v;
    }
    Ok(HeatmapTable { blocks, ts, cells })
}

pub fn render_attn_csv(points: &[AttnCurvePoint]) -> String {
    let mut s = format!("{CSV_MAGIC_PREFIX} attn_norm text/image Frobenius norms per block x timestep\n");
    s.push_str("block,t,text_norm,image_norm\n");
    for p in points {
        s.push_str(&format!("{},{},{},{}\n", p.block, p.t, p.text_norm, p.image_norm));
    }
    s
}
