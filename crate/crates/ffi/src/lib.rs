//! C ABI over the lane pipeline.
//!
//! Every function returns a [`D3lStatus`]. On failure the message is kept
//! per thread and can be read with [`d3l_last_error`]. Strings handed out by
//! the library must be released with [`d3l_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use depth3dlane::config::RunConfig;
use depth3dlane::data::LaneSetFile;
use depth3dlane::geometry::{ground_homography, RigConfig};
use depth3dlane::metrics::{evaluate, EvalConfig, Frame};
use depth3dlane::model::Model;
use depth3dlane::pipeline::infer;
use depth3dlane::raster::Raster;
use depth3dlane::Error;

/// Status codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum D3lStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Parse = 4,
    Shape = 5,
    Io = 6,
    Checkpoint = 7,
    Rig = 8,
    Other = 9,
    Panic = 10,
}

/// Opaque model handle.
pub struct D3lModel {
    model: Model,
    run: RunConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> D3lStatus {
    match e.kind() {
        "config" => D3lStatus::Config,
        "parse" => D3lStatus::Parse,
        "shape" => D3lStatus::Shape,
        "io" | "file" | "image" => D3lStatus::Io,
        "checkpoint" => D3lStatus::Checkpoint,
        "rig" => D3lStatus::Rig,
        _ => D3lStatus::Other,
    }
}

enum Fail {
    Null(&'static str),
    Utf8(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> D3lStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => D3lStatus::Ok,
        Ok(Err(Fail::Null(arg))) => {
            set_error(format!("null argument `{arg}`"));
            D3lStatus::NullArgument
        }
        Ok(Err(Fail::Utf8(arg))) => {
            set_error(format!("argument `{arg}` is not valid UTF-8"));
            D3lStatus::InvalidUtf8
        }
        Ok(Err(Fail::Lib(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            D3lStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Utf8(name))
}

/// # Safety
/// `out` is null or writable.
unsafe fn give_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = CString::new(s).expect("JSON has no NUL").into_raw();
    Ok(())
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn d3l_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` is null or came from this library and was not freed before.
#[no_mangle]
pub unsafe extern "C" fn d3l_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load a checkpoint. `config_toml` (nullable) supplies CRF and evaluation
/// settings; defaults otherwise.
///
/// # Safety
/// String arguments are null or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn d3l_model_load(
    checkpoint_path: *const c_char,
    config_toml: *const c_char,
    out: *mut *mut D3lModel,
) -> D3lStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let path = text(checkpoint_path, "checkpoint_path")?;
        let run = if config_toml.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_toml(text(config_toml, "config_toml")?)?
        };
        let model = Model::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(D3lModel { model, run }));
        Ok(())
    })
}

/// # Safety
/// `model` is null or came from [`d3l_model_load`] and was not freed before.
#[no_mangle]
pub unsafe extern "C" fn d3l_model_free(model: *mut D3lModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Network input size of `model`.
///
/// # Safety
/// `model` is a live handle; `height` and `width` are writable.
#[no_mangle]
pub unsafe extern "C" fn d3l_model_input_size(model: *const D3lModel, height: *mut usize, width: *mut usize) -> D3lStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        if height.is_null() || width.is_null() {
            return Err(Fail::Null("height/width"));
        }
        let (h, w) = m.model.virtual_rig().image_size();
        *height = h;
        *width = w;
        Ok(())
    })
}

/// Detect lanes in an interleaved 8-bit RGB image (`height * width * 3`
/// bytes, row-major). `rig_toml` (nullable) describes the camera; the model's
/// virtual camera is assumed otherwise. Writes a lane-set JSON document.
///
/// # Safety
/// `rgb` points to `height * width * 3` readable bytes; strings are null or
/// NUL-terminated; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn d3l_infer(
    model: *const D3lModel,
    rgb: *const u8,
    height: usize,
    width: usize,
    rig_toml: *const c_char,
    use_crf: bool,
    out_json: *mut *mut c_char,
) -> D3lStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        if rgb.is_null() {
            return Err(Fail::Null("rgb"));
        }
        let bytes = std::slice::from_raw_parts(rgb, height * width * 3);
        let image = Raster::from_fn(3, height, width, |c, v, u| bytes[(v * width + u) * 3 + c] as f64 / 255.0);
        let rig = if rig_toml.is_null() {
            m.model.virtual_rig().clone()
        } else {
            RigConfig::from_toml(text(rig_toml, "rig_toml")?)?.build()?
        };
        let crf = (use_crf && m.model.config().crf_on).then_some(&m.run.crf);
        let out = infer(&m.model, &image, None, &rig, crf)?;
        let lanes: Vec<_> = out.lanes.iter().map(|l| l.scored()).collect();
        give_string(out_json, LaneSetFile::from_scored(&lanes).to_json())
    })
}

/// Score one frame of predicted lanes against ground truth (both lane-set
/// JSON) with the default protocol. Writes the metrics as JSON.
///
/// # Safety
/// Strings are null or NUL-terminated; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn d3l_evaluate(
    preds_json: *const c_char,
    gts_json: *const c_char,
    out_json: *mut *mut c_char,
) -> D3lStatus {
    guard(|| {
        let preds = LaneSetFile::from_json(text(preds_json, "preds_json")?)?;
        let gts = LaneSetFile::from_json(text(gts_json, "gts_json")?)?;
        let frame = Frame {
            id: "frame".into(),
            preds: preds.scored(),
            gts: gts.lanes,
        };
        let r = evaluate(&[frame], &EvalConfig::default())?;
        give_string(out_json, r.to_json())
    })
}

/// Ground-plane homography taking `src` pixels to `dst` pixels, row-major
/// into `out[9]`, scaled so `out[8] == 1`.
///
/// # Safety
/// Strings are null or NUL-terminated; `out` has room for 9 doubles.
#[no_mangle]
pub unsafe extern "C" fn d3l_ground_homography(
    src_rig_toml: *const c_char,
    dst_rig_toml: *const c_char,
    out: *mut f64,
) -> D3lStatus {
    guard(|| {
        let src = RigConfig::from_toml(text(src_rig_toml, "src_rig_toml")?)?.build()?;
        let dst = RigConfig::from_toml(text(dst_rig_toml, "dst_rig_toml")?)?.build()?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let h = ground_homography(&src, &dst);
        let s = h[(2, 2)];
        let o = std::slice::from_raw_parts_mut(out, 9);
        for r in 0..3 {
            for c in 0..3 {
                o[r * 3 + c] = h[(r, c)] / s;
            }
        }
        Ok(())
    })
}
