//! C interface to the streaming pipeline.
//!
//! Handles are opaque; every call returns an `SnStatus`. On failure the
//! message of the last error on the calling thread is available from
//! `sn_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use scenenav::ingest::{blockify, Block, Session};
use scenenav::pipeline::{open_session, Pipeline, RunOptions};
use scenenav::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidInput = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Pipeline = 6,
    /// The stream has no further blocks.
    Finished = 7,
    Panic = 8,
}

/// Opaque pipeline handle.
pub struct SnPipeline {
    pipeline: Pipeline,
    blocks: Box<dyn Iterator<Item = scenenav::Result<Block>>>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SnStatus {
    match e {
        Error::InBlock { source, .. } => status_of(source),
        Error::InvalidInput(_) | Error::Validation { .. } => SnStatus::InvalidInput,
        Error::Io { .. } => SnStatus::Io,
        Error::Format(_) => SnStatus::Format,
        Error::Config(_) => SnStatus::Config,
        _ => SnStatus::Pipeline,
    }
}

fn guard(f: impl FnOnce() -> Result<SnStatus, (SnStatus, String)>) -> SnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => s,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside the pipeline".into());
            SnStatus::Panic
        }
    }
}

fn fail(e: Error) -> (SnStatus, String) {
    (status_of(&e), e.to_string())
}

unsafe fn path_arg(p: *const c_char) -> Result<Option<PathBuf>, (SnStatus, String)> {
    if p.is_null() {
        return Ok(None);
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SnStatus::InvalidInput, "path is not UTF-8".to_string()))?;
    Ok(Some(PathBuf::from(s)))
}

unsafe fn handle<'a>(h: *mut SnPipeline) -> Result<&'a mut SnPipeline, (SnStatus, String)> {
    h.as_mut().ok_or((SnStatus::NullArgument, "null pipeline handle".into()))
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Opens a session directory. `config_path` may be NULL.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sn_pipeline_open(
    session_dir: *const c_char,
    config_path: *const c_char,
    out: *mut *mut SnPipeline,
) -> SnStatus {
    guard(|| {
        if out.is_null() {
            return Err((SnStatus::NullArgument, "null output pointer".into()));
        }
        *out = ptr::null_mut();
        let session = path_arg(session_dir)?.ok_or((SnStatus::NullArgument, "null session path".into()))?;
        let opts = RunOptions {
            session,
            config_file: path_arg(config_path)?,
            ..RunOptions::default()
        };
        let (session, pipeline): (Session, Pipeline) = open_session(&opts).map_err(fail)?;
        let n = session.len();
        let frames = (0..n).map(move |i| session.read_frame(i));
        let blocks = Box::new(blockify(frames, pipeline.config()));
        *out = Box::into_raw(Box::new(SnPipeline { pipeline, blocks }));
        Ok(SnStatus::Ok)
    })
}

/// Processes the next block; `Finished` once the stream is exhausted.
/// `block_out` (may be NULL) receives the processed block index.
///
/// # Safety
/// `h` must come from `sn_pipeline_open`.
#[no_mangle]
pub unsafe extern "C" fn sn_pipeline_step(h: *mut SnPipeline, block_out: *mut u64) -> SnStatus {
    guard(|| {
        let h = handle(h)?;
        let Some(block) = h.blocks.next() else {
            return Ok(SnStatus::Finished);
        };
        let block = block.map_err(fail)?;
        let report = h.pipeline.process_block(&block).map_err(fail)?;
        if let Some(out) = block_out.as_mut() {
            *out = report.block as u64;
        }
        Ok(SnStatus::Ok)
    })
}

/// Processes every remaining block.
///
/// # Safety
/// `h` must come from `sn_pipeline_open`.
#[no_mangle]
pub unsafe extern "C" fn sn_pipeline_run(h: *mut SnPipeline) -> SnStatus {
    loop {
        match sn_pipeline_step(h, ptr::null_mut()) {
            SnStatus::Ok => continue,
            SnStatus::Finished => return SnStatus::Ok,
            other => return other,
        }
    }
}

/// Semantic goal class for the following blocks; negative clears it.
///
/// # Safety
/// `h` must come from `sn_pipeline_open`.
#[no_mangle]
pub unsafe extern "C" fn sn_pipeline_set_goal_class(h: *mut SnPipeline, class_id: i64) -> SnStatus {
    guard(|| {
        let h = handle(h)?;
        let class = u32::try_from(class_id).ok();
        if class_id >= 0 && class.is_none() {
            return Err((SnStatus::InvalidInput, format!("class id {class_id} out of range")));
        }
        h.pipeline.set_goal_class(class);
        Ok(SnStatus::Ok)
    })
}

/// Number of processed blocks and aligned frames.
///
/// # Safety
/// `h` must come from `sn_pipeline_open`; outputs may be NULL.
#[no_mangle]
pub unsafe extern "C" fn sn_pipeline_counts(h: *mut SnPipeline, blocks: *mut u64, frames: *mut u64) -> SnStatus {
    guard(|| {
        let h = handle(h)?;
        if let Some(b) = blocks.as_mut() {
            *b = h.pipeline.blocks().len() as u64;
        }
        if let Some(f) = frames.as_mut() {
            *f = h.pipeline.trajectory().len() as u64;
        }
        Ok(SnStatus::Ok)
    })
}

/// Global pose of the `i`-th aligned frame as a row-major 3×4 matrix.
///
/// # Safety
/// `h` must come from `sn_pipeline_open`; `pose_out` must hold 12 doubles.
#[no_mangle]
pub unsafe extern "C" fn sn_pipeline_pose(
    h: *mut SnPipeline,
    i: u64,
    frame_out: *mut u64,
    pose_out: *mut f64,
) -> SnStatus {
    guard(|| {
        let h = handle(h)?;
        if pose_out.is_null() {
            return Err((SnStatus::NullArgument, "null pose buffer".into()));
        }
        let traj = h.pipeline.trajectory();
        let (frame, pose) = usize::try_from(i)
            .ok()
            .and_then(|i| traj.get(i))
            .ok_or_else(|| (SnStatus::InvalidInput, format!("pose {i} of {}", traj.len())))?;
        ptr::copy_nonoverlapping(pose.to_row_major().as_ptr(), pose_out, 12);
        if let Some(f) = frame_out.as_mut() {
            *f = *frame as u64;
        }
        Ok(SnStatus::Ok)
    })
}

/// Run summary as `key=value` lines. Free with `sn_string_free`.
///
/// # Safety
/// `h` must come from `sn_pipeline_open`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sn_pipeline_report(h: *mut SnPipeline, out: *mut *mut c_char) -> SnStatus {
    guard(|| {
        let h = handle(h)?;
        if out.is_null() {
            return Err((SnStatus::NullArgument, "null output pointer".into()));
        }
        let text = h.pipeline.run_report().map_err(fail)?.to_text();
        *out = CString::new(text).expect("report has no NUL").into_raw();
        Ok(SnStatus::Ok)
    })
}

/// Writes all artifacts into `out_dir`.
///
/// # Safety
/// `h` must come from `sn_pipeline_open`; `out_dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sn_pipeline_write_outputs(h: *mut SnPipeline, out_dir: *const c_char) -> SnStatus {
    guard(|| {
        let h = handle(h)?;
        let dir = path_arg(out_dir)?.ok_or((SnStatus::NullArgument, "null output directory".into()))?;
        h.pipeline.write_outputs(&dir).map_err(fail)?;
        Ok(SnStatus::Ok)
    })
}

/// # Safety
/// `h` must come from `sn_pipeline_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sn_pipeline_free(h: *mut SnPipeline) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `s` must come from this library, or be NULL.
#[no_mangle]
pub unsafe extern "C" fn sn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
