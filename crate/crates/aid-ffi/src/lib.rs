//! C ABI over the core crate: opaque handles, integer status codes, and a
//! thread-local last-error message. The generated header lives in
//! `include/aid_ffi.h`.
//!
//! Ownership rules: every `*_new`/`*_load` has a matching `*_free`; output
//! buffers are caller-allocated with their capacity passed explicitly.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use aid_core::aid::{self, AidParams};
use aid_core::checkpoint;
use aid_core::error::Error;
use aid_core::model::Backbone;
use aid_core::sampler::{sample, AidMode, SampleSource, SamplerConfig};
use aid_core::toydata;

/// Status codes mirroring the CLI exit-code convention.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum AidStatus {
    Ok = 0,
    /// Contract, configuration, i/o, or format failure.
    ContractError = 1,
    /// Non-finite numerics.
    NumericError = 2,
    /// Null pointer or malformed argument at the boundary.
    InvalidArgument = 3,
    /// Output buffer capacity too small.
    BufferTooSmall = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> AidStatus {
    match err.exit_code() {
        2 => AidStatus::NumericError,
        _ => AidStatus::ContractError,
    }
}

fn fail(err: Error) -> AidStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

fn invalid(msg: &str) -> AidStatus {
    set_error(msg);
    AidStatus::InvalidArgument
}

/// Loaded checkpoint: frozen weights plus optional modulation stacks.
pub struct AidModel {
    backbone: Backbone<f32>,
    aid: Option<AidParams<f32>>,
    grid_side: usize,
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length in bytes.
#[no_mangle]
pub extern "C" fn aid_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap);
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
                // Guarantee termination even when truncated.
                *buf.add(n - 1) = 0;
            }
        }
        bytes.len() - 1
    })
}

/// Crate version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aid_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Load a checkpoint directory. On success writes a handle to `out`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn aid_model_load(path: *const c_char, out: *mut *mut AidModel) -> AidStatus {
    if path.is_null() || out.is_null() {
        return invalid("aid_model_load: null pointer");
    }
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        return invalid("aid_model_load: path is not UTF-8");
    };
    let ckpt = match checkpoint::load(Path::new(path)) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let backbone = match ckpt.backbone_model() {
        Ok(b) => b,
        Err(e) => return fail(e),
    };
    let aid = match ckpt.aid_params() {
        Ok(a) => a,
        Err(e) => return fail(e),
    };
    let model = Box::new(AidModel {
        backbone,
        aid,
        grid_side: ckpt.config.data.grid_side,
    });
    *out = Box::into_raw(model);
    AidStatus::Ok
}

/// # Safety
/// `model` must come from `aid_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn aid_model_free(model: *mut AidModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub extern "C" fn aid_model_num_blocks(model: *const AidModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.backbone.config.num_blocks)
}

#[no_mangle]
pub extern "C" fn aid_model_text_len(model: *const AidModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.backbone.config.text_len)
}

#[no_mangle]
pub extern "C" fn aid_model_latent_len(model: *const AidModel) -> usize {
    unsafe { model.as_ref() }
        .map_or(0, |m| m.backbone.config.image_len * m.backbone.config.feature_dim)
}

#[no_mangle]
pub extern "C" fn aid_model_grid_cells(model: *const AidModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.grid_side * m.grid_side)
}

#[no_mangle]
pub extern "C" fn aid_model_has_modulation(model: *const AidModel) -> bool {
    unsafe { model.as_ref() }.is_some_and(|m| m.aid.is_some())
}

/// Modulation participation during sampling.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum AidSampleMode {
    Off = 0,
    Learned = 1,
}

fn build_prompt(model: &AidModel, color: u32, count: u32) -> Result<toydata::ToyPrompt, Error> {
    if color > u8::MAX as u32 || count > u8::MAX as u32 {
        return Err(Error::Config(format!(
            "prompt attributes out of range: color={color} count={count}"
        )));
    }
    toydata::make_prompt(color as u8, count as u8, model.backbone.config.text_len)
}

/// Sample one trajectory and write the final latent (length
/// `aid_model_latent_len`) into `out_latent`.
///
/// # Safety
/// `model` must be a live handle; `out_latent` must hold `latent_cap` f32s.
#[no_mangle]
pub unsafe extern "C" fn aid_sample_latent(
    model: *const AidModel,
    color: u32,
    count: u32,
    num_steps: usize,
    cfg_scale: f64,
    seed: u64,
    mode: AidSampleMode,
    out_latent: *mut f32,
    latent_cap: usize,
) -> AidStatus {
    let Some(model) = model.as_ref() else {
        return invalid("aid_sample_latent: null model");
    };
    if out_latent.is_null() {
        return invalid("aid_sample_latent: null output buffer");
    }
    let need = model.backbone.config.image_len * model.backbone.config.feature_dim;
    if latent_cap < need {
        set_error(&format!("latent buffer holds {latent_cap}, need {need}"));
        return AidStatus::BufferTooSmall;
    }
    let prompt = match build_prompt(model, color, count) {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    let sc = SamplerConfig {
        num_steps,
        cfg_scale,
        seed,
        capture_alpha: false,
        capture_attention_norm: false,
        aid_mode: match mode {
            AidSampleMode::Off => AidMode::Off,
            AidSampleMode::Learned => AidMode::Learned,
        },
    };
    let source = SampleSource {
        backbone: &model.backbone,
        aid: model.aid.as_ref(),
        lora: None,
        sparse: None,
    };
    match sample(&source, &prompt.tokens, &sc, "ffi") {
        Ok(traj) => {
            let latent = traj.final_latent();
            ptr::copy_nonoverlapping(latent.as_ptr(), out_latent, need);
            AidStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Sample and decode to grid codes (length `aid_model_grid_cells`).
///
/// # Safety
/// Same rules as `aid_sample_latent`; `out_codes` must hold `codes_cap` u8s.
#[no_mangle]
pub unsafe extern "C" fn aid_sample_grid(
    model: *const AidModel,
    color: u32,
    count: u32,
    num_steps: usize,
    cfg_scale: f64,
    seed: u64,
    mode: AidSampleMode,
    out_codes: *mut u8,
    codes_cap: usize,
) -> AidStatus {
    let Some(model_ref) = model.as_ref() else {
        return invalid("aid_sample_grid: null model");
    };
    if out_codes.is_null() {
        return invalid("aid_sample_grid: null output buffer");
    }
    let cells = model_ref.grid_side * model_ref.grid_side;
    if codes_cap < cells {
        set_error(&format!("code buffer holds {codes_cap}, need {cells}"));
        return AidStatus::BufferTooSmall;
    }
    let need = model_ref.backbone.config.image_len * model_ref.backbone.config.feature_dim;
    let mut latent = vec![0.0f32; need];
    let status = aid_sample_latent(
        model,
        color,
        count,
        num_steps,
        cfg_scale,
        seed,
        mode,
        latent.as_mut_ptr(),
        need,
    );
    if status != AidStatus::Ok {
        return status;
    }
    match toydata::decode(&latent, model_ref.backbone.config.feature_dim, model_ref.grid_side) {
        Ok(grid) => {
            ptr::copy_nonoverlapping(grid.codes.as_ptr(), out_codes, cells);
            AidStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Evaluate one block's modulation coefficients for a prompt at time `t`;
/// writes `aid_model_text_len` values, each strictly inside (-1, 1).
///
/// # Safety
/// `model` must be a live handle; `out_alpha` must hold `alpha_cap` f32s.
#[no_mangle]
pub unsafe extern "C" fn aid_compute_alpha(
    model: *const AidModel,
    block: usize,
    color: u32,
    count: u32,
    t: f64,
    out_alpha: *mut f32,
    alpha_cap: usize,
) -> AidStatus {
    let Some(model) = model.as_ref() else {
        return invalid("aid_compute_alpha: null model");
    };
    if out_alpha.is_null() {
        return invalid("aid_compute_alpha: null output buffer");
    }
    let Some(aid_params) = model.aid.as_ref() else {
        set_error("checkpoint holds no modulation weights");
        return AidStatus::ContractError;
    };
    let n = model.backbone.config.text_len;
    if alpha_cap < n {
        set_error(&format!("alpha buffer holds {alpha_cap}, need {n}"));
        return AidStatus::BufferTooSmall;
    }
    let prompt = match build_prompt(model, color, count) {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    // Block-0 text features: token embedding plus positions.
    let cfg = &model.backbone.config;
    let d = cfg.feature_dim;
    let embed = model
        .backbone
        .params
        .by_name("embed.tokens")
        .expect("schema");
    let pos = model
        .backbone
        .params
        .by_name("embed.pos_text")
        .expect("schema");
    let mut c0 = vec![0.0f32; n * d];
    for (i, &id) in prompt.tokens.ids.iter().enumerate() {
        for j in 0..d {
            c0[i * d + j] = embed.data[id as usize * d + j] + pos.data[i * d + j];
        }
    }
    match aid::compute_alpha_values(aid_params, block, &c0, n, t) {
        Ok(alpha) => {
            ptr::copy_nonoverlapping(alpha.values.as_ptr(), out_alpha, n);
            AidStatus::Ok
        }
        Err(e) => fail(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use aid_core::checkpoint::{Checkpoint, CheckpointKind, DIVERGENCE_NOTES};
    use aid_core::config::AppConfig;
    use aid_core::model::ModelConfig;

    fn write_fixture(dir: &Path) {
        let mut config = AppConfig::default();
        config.model = ModelConfig {
            num_blocks: 2,
            feature_dim: 8,
            num_heads: 2,
            text_len: 4,
            image_len: 4,
            vocab_size: 16,
            aid_hidden_dim: 4,
            seed: 3,
        };
        config.data.grid_side = 2;
        let backbone = Backbone::<f32>::init(config.model.clone()).unwrap();
        let aid = AidParams::<f32>::init(&config.model, 3).unwrap();
        let ckpt = Checkpoint {
            kind: CheckpointKind::Aid,
            config,
            step: 0,
            divergences: DIVERGENCE_NOTES.to_string(),
            backbone: backbone.params,
            aid: Some(aid.params),
            lora: None,
            state: None,
        };
        checkpoint::save(&ckpt, dir).unwrap();
    }

    fn load_fixture(tag: &str) -> *mut AidModel {
        let dir = std::env::temp_dir().join(format!("aid-ffi-test-{tag}-{}", std::process::id()));
        write_fixture(&dir);
        let c_path = CString::new(dir.to_str().unwrap()).unwrap();
        let mut handle: *mut AidModel = ptr::null_mut();
        let status = unsafe { aid_model_load(c_path.as_ptr(), &mut handle) };
        assert!(status == AidStatus::Ok);
        assert!(!handle.is_null());
        handle
    }

    #[test]
    fn load_query_sample_free() {
        let handle = load_fixture("roundtrip");
        assert_eq!(aid_model_num_blocks(handle), 2);
        assert_eq!(aid_model_text_len(handle), 4);
        assert_eq!(aid_model_latent_len(handle), 32);
        assert_eq!(aid_model_grid_cells(handle), 4);
        assert!(aid_model_has_modulation(handle));

        let mut latent = vec![0.0f32; 32];
        let status = unsafe {
            aid_sample_latent(
                handle,
                1,
                2,
                4,
                1.5,
                9,
                AidSampleMode::Learned,
                latent.as_mut_ptr(),
                latent.len(),
            )
        };
        assert!(status == AidStatus::Ok);
        assert!(latent.iter().any(|&x| x != 0.0));

        // Zero-init modulation: learned and off agree bitwise.
        let mut latent_off = vec![0.0f32; 32];
        let status = unsafe {
            aid_sample_latent(
                handle,
                1,
                2,
                4,
                1.5,
                9,
                AidSampleMode::Off,
                latent_off.as_mut_ptr(),
                latent_off.len(),
            )
        };
        assert!(status == AidStatus::Ok);
        assert_eq!(latent, latent_off);

        let mut codes = vec![0u8; 4];
        let status = unsafe {
            aid_sample_grid(
                handle,
                1,
                2,
                4,
                1.5,
                9,
                AidSampleMode::Off,
                codes.as_mut_ptr(),
                codes.len(),
            )
        };
        assert!(status == AidStatus::Ok);

        unsafe { aid_model_free(handle) };
    }

    #[test]
    fn alpha_is_bounded_and_zero_at_init() {
        let handle = load_fixture("alpha");
        let mut alpha = vec![9.0f32; 4];
        let status =
            unsafe { aid_compute_alpha(handle, 1, 2, 3, 0.5, alpha.as_mut_ptr(), alpha.len()) };
        assert!(status == AidStatus::Ok);
        // Freshly initialized stacks produce exactly zero.
        assert_eq!(alpha, vec![0.0; 4]);

        let status =
            unsafe { aid_compute_alpha(handle, 7, 2, 3, 0.5, alpha.as_mut_ptr(), alpha.len()) };
        assert!(status == AidStatus::ContractError);
        let mut buf = vec![0 as c_char; 256];
        let len = aid_last_error(buf.as_mut_ptr(), buf.len());
        assert!(len > 0);
        unsafe { aid_model_free(handle) };
    }

    #[test]
    fn errors_and_buffer_checks() {
        let c_path = CString::new("/nonexistent/aid-ckpt").unwrap();
        let mut handle: *mut AidModel = ptr::null_mut();
        let status = unsafe { aid_model_load(c_path.as_ptr(), &mut handle) };
        assert!(status == AidStatus::ContractError);
        assert!(handle.is_null());
        let mut buf = vec![0 as c_char; 512];
        let len = aid_last_error(buf.as_mut_ptr(), buf.len());
        assert!(len > 0);
        let msg = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy();
        assert!(msg.contains("nonexistent"), "{msg}");

        let handle = load_fixture("buffers");
        let mut tiny = vec![0.0f32; 3];
        let status = unsafe {
            aid_sample_latent(
                handle,
                0,
                1,
                2,
                1.0,
                0,
                AidSampleMode::Off,
                tiny.as_mut_ptr(),
                tiny.len(),
            )
        };
        assert!(status == AidStatus::BufferTooSmall);
        // Bad prompt attribute surfaces as a contract error.
        let mut latent = vec![0.0f32; 32];
        let status = unsafe {
            aid_sample_latent(
                handle,
                99,
                1,
                2,
                1.0,
                0,
                AidSampleMode::Off,
                latent.as_mut_ptr(),
                latent.len(),
            )
        };
        assert!(status == AidStatus::ContractError);
        unsafe { aid_model_free(handle) };
    }

    #[test]
    fn version_is_a_c_string() {
        let v = unsafe { CStr::from_ptr(aid_version()) };
        assert!(!v.to_string_lossy().is_empty());
    }

    #[test]
    fn header_was_generated() {
        let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/aid_ffi.h");
        let text = std::fs::read_to_string(header).expect("cbindgen header exists");
        for symbol in [
            "aid_model_load",
            "aid_model_free",
            "aid_sample_latent",
            "aid_sample_grid",
            "aid_compute_alpha",
            "aid_last_error",
            "AidStatus",
        ] {
            assert!(text.contains(symbol), "header lacks {symbol}");
        }
    }
}
