//! C ABI over the cfsl episode machinery.
//!
//! Every function returns a [`CfslStatus`]. On failure a description is
//! available from [`cfsl_last_error`] on the same thread until the next
//! call. Handles are opaque and must be released with their `_free`
//! function. Buffers are caller-owned; size queries tell how much to
//! allocate.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use cfsl::config::{TaskConfig, TaskKind};
use cfsl::pack::DatasetPack;
use cfsl::sampler::sample_episode;
use cfsl::session::{EpisodeSession, GuardError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfslStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    InvalidConfig = 4,
    SamplingFailed = 5,
    BufferTooSmall = 6,
    StreamExhausted = 10,
    PastSetInaccessible = 11,
    OutOfOrder = 12,
    TargetNotReady = 13,
    TargetNotRequested = 14,
    SessionClosed = 15,
    PredictionShape = 16,
    BankAppendOnly = 17,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfslTaskKind {
    SingleFsl = 0,
    NewSamples = 1,
    NewClasses = 2,
    NewClassesOverwrite = 3,
    NewClassesNewSamples = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CfslTaskConfig {
    pub nss: u32,
    pub cci: u32,
    pub n_way: u32,
    pub k_shot: u32,
    pub k_target: u32,
    pub overwrite: bool,
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CfslScore {
    pub accuracy: f64,
    pub correct: u64,
    pub total: u64,
    pub atm: f64,
    pub memory_bytes: u64,
    pub episode_index: u64,
}

/// A dataset pack loaded in memory.
pub struct CfslPack(Arc<DatasetPack>);

/// One episode streamed under the sequential guard.
pub struct CfslSession(EpisodeSession);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl ToString) {
    let text = message.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("nul bytes removed"));
}

fn fail(status: CfslStatus, message: impl ToString) -> CfslStatus {
    set_error(message);
    status
}

fn guard_status(e: &GuardError) -> CfslStatus {
    match e {
        GuardError::StreamExhausted => CfslStatus::StreamExhausted,
        GuardError::PastSetInaccessible { .. } => CfslStatus::PastSetInaccessible,
        GuardError::OutOfOrder { .. } => CfslStatus::OutOfOrder,
        GuardError::TargetNotYetAvailable { .. } => CfslStatus::TargetNotReady,
        GuardError::TargetNotRequested => CfslStatus::TargetNotRequested,
        GuardError::SessionClosed => CfslStatus::SessionClosed,
        GuardError::PredictionShape { .. } => CfslStatus::PredictionShape,
        GuardError::BankAppendOnly => CfslStatus::BankAppendOnly,
    }
}

fn guarded(f: impl FnOnce() -> CfslStatus) -> CfslStatus {
    set_error("");
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(CfslStatus::Panic, "internal panic"))
}

impl From<CfslTaskConfig> for TaskConfig {
    fn from(c: CfslTaskConfig) -> Self {
        TaskConfig {
            nss: c.nss,
            cci: c.cci,
            n_way: c.n_way,
            k_shot: c.k_shot,
            k_target: c.k_target,
            overwrite: c.overwrite,
            seed: c.seed,
        }
    }
}

unsafe fn checked_config(config: *const CfslTaskConfig) -> Result<TaskConfig, CfslStatus> {
    let Some(config) = config.as_ref() else {
        return Err(fail(CfslStatus::NullPointer, "config is null"));
    };
    let config = TaskConfig::from(*config);
    config
        .ensure_valid()
        .map_err(|e| fail(CfslStatus::InvalidConfig, e))?;
    Ok(config)
}

/// Message for the last failed call on this thread. Valid until the next
/// call into the library from this thread.
#[no_mangle]
pub extern "C" fn cfsl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cfsl_pack_open(path: *const c_char, out: *mut *mut CfslPack) -> CfslStatus {
    guarded(|| {
        if path.is_null() || out.is_null() {
            return fail(CfslStatus::NullPointer, "null argument");
        }
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(CfslStatus::InvalidArgument, "path is not UTF-8");
        };
        match DatasetPack::read(Path::new(path)) {
            Ok(pack) => {
                *out = Box::into_raw(Box::new(CfslPack(Arc::new(pack))));
                CfslStatus::Ok
            }
            Err(e) => fail(CfslStatus::Io, e),
        }
    })
}

/// # Safety
/// `pack` must come from [`cfsl_pack_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cfsl_pack_free(pack: *mut CfslPack) {
    if !pack.is_null() {
        drop(Box::from_raw(pack));
    }
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cfsl_pack_geometry(
    pack: *const CfslPack,
    height: *mut u32,
    width: *mut u32,
    channels: *mut u32,
    num_classes: *mut u32,
) -> CfslStatus {
    guarded(|| {
        let Some(pack) = pack.as_ref() else {
            return fail(CfslStatus::NullPointer, "pack is null");
        };
        if height.is_null() || width.is_null() || channels.is_null() || num_classes.is_null() {
            return fail(CfslStatus::NullPointer, "null output");
        }
        let (h, w, c) = pack.0.geometry();
        *height = h;
        *width = w;
        *channels = c;
        *num_classes = pack.0.num_classes() as u32;
        CfslStatus::Ok
    })
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cfsl_config_task_kind(config: *const CfslTaskConfig, out: *mut CfslTaskKind) -> CfslStatus {
    guarded(|| {
        let config = match checked_config(config) {
            Ok(c) => c,
            Err(status) => return status,
        };
        if out.is_null() {
            return fail(CfslStatus::NullPointer, "null output");
        }
        *out = match config.task_kind() {
            TaskKind::SingleFsl => CfslTaskKind::SingleFsl,
            TaskKind::NewSamples => CfslTaskKind::NewSamples,
            TaskKind::NewClasses => CfslTaskKind::NewClasses,
            TaskKind::NewClassesOverwrite => CfslTaskKind::NewClassesOverwrite,
            TaskKind::NewClassesNewSamples => CfslTaskKind::NewClassesNewSamples,
        };
        CfslStatus::Ok
    })
}

/// Number of distinct labels a learner must be able to output.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cfsl_config_output_label_count(config: *const CfslTaskConfig, out: *mut u32) -> CfslStatus {
    guarded(|| {
        let config = match checked_config(config) {
            Ok(c) => c,
            Err(status) => return status,
        };
        if out.is_null() {
            return fail(CfslStatus::NullPointer, "null output");
        }
        match config.output_label_count() {
            Ok(n) => {
                *out = n;
                CfslStatus::Ok
            }
            Err(e) => fail(CfslStatus::InvalidConfig, e),
        }
    })
}

/// Samples episode `episode_index` and opens a session over it.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cfsl_session_new(
    pack: *const CfslPack,
    config: *const CfslTaskConfig,
    episode_index: u64,
    out: *mut *mut CfslSession,
) -> CfslStatus {
    guarded(|| {
        let Some(pack) = pack.as_ref() else {
            return fail(CfslStatus::NullPointer, "pack is null");
        };
        let config = match checked_config(config) {
            Ok(c) => c,
            Err(status) => return status,
        };
        if out.is_null() {
            return fail(CfslStatus::NullPointer, "null output");
        }
        match sample_episode(&pack.0, &config, episode_index) {
            Ok(episode) => {
                let session = EpisodeSession::new(pack.0.clone(), episode);
                *out = Box::into_raw(Box::new(CfslSession(session)));
                CfslStatus::Ok
            }
            Err(e) => fail(CfslStatus::SamplingFailed, e),
        }
    })
}

/// # Safety
/// `session` must come from [`cfsl_session_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cfsl_session_free(session: *mut CfslSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Sizes needed for support and target buffers: samples per support set,
/// samples in the target set and bytes per sample.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cfsl_session_sizes(
    session: *const CfslSession,
    support_count: *mut u32,
    target_count: *mut u32,
    sample_bytes: *mut u64,
) -> CfslStatus {
    guarded(|| {
        let Some(session) = session.as_ref() else {
            return fail(CfslStatus::NullPointer, "session is null");
        };
        if support_count.is_null() || target_count.is_null() || sample_bytes.is_null() {
            return fail(CfslStatus::NullPointer, "null output");
        }
        *support_count = session.0.config().support_set_size() as u32;
        *target_count = session.0.target_len() as u32;
        *sample_bytes = session.0.pack().sample_bytes() as u64;
        CfslStatus::Ok
    })
}

fn copy_out<T: Copy>(src: &[T], dst: *mut T, capacity: usize) -> Result<(), CfslStatus> {
    if src.len() > capacity {
        return Err(fail(
            CfslStatus::BufferTooSmall,
            format!("need {} elements, buffer holds {capacity}", src.len()),
        ));
    }
    if !src.is_empty() {
        // SAFETY: caller guarantees `dst` holds `capacity` elements
        unsafe { ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len()) };
    }
    Ok(())
}

/// Advances to the next support set and copies its labels and pixels out.
/// `position` receives the 1-based set position.
///
/// # Safety
/// `labels` must hold `labels_capacity` values and `pixels` must hold
/// `pixels_capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn cfsl_session_next_support(
    session: *mut CfslSession,
    labels: *mut u32,
    labels_capacity: usize,
    pixels: *mut u8,
    pixels_capacity: usize,
    position: *mut u32,
) -> CfslStatus {
    guarded(|| {
        let Some(session) = session.as_mut() else {
            return fail(CfslStatus::NullPointer, "session is null");
        };
        if labels.is_null() || pixels.is_null() || position.is_null() {
            return fail(CfslStatus::NullPointer, "null buffer");
        }
        let needed = session.0.config().support_set_size();
        let bytes = needed * session.0.pack().sample_bytes();
        // check capacity first so a short buffer does not consume the set
        if labels_capacity < needed || pixels_capacity < bytes {
            return fail(CfslStatus::BufferTooSmall, "support buffers too small");
        }
        match session.0.next_support() {
            Ok(view) => {
                let pixel_data = view.to_contiguous();
                if let Err(s) = copy_out(&view.labels, labels, labels_capacity) {
                    return s;
                }
                if let Err(s) = copy_out(&pixel_data, pixels, pixels_capacity) {
                    return s;
                }
                *position = view.position;
                CfslStatus::Ok
            }
            Err(e) => fail(guard_status(&e), e),
        }
    })
}

/// Appends `len` bytes under `tag` to the session's memory bank.
///
/// # Safety
/// `tag` must be NUL-terminated and `data` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cfsl_session_store(
    session: *mut CfslSession,
    tag: *const c_char,
    data: *const u8,
    len: usize,
    element_width: u32,
) -> CfslStatus {
    guarded(|| {
        let Some(session) = session.as_mut() else {
            return fail(CfslStatus::NullPointer, "session is null");
        };
        if tag.is_null() || (data.is_null() && len > 0) {
            return fail(CfslStatus::NullPointer, "null argument");
        }
        let tag = CStr::from_ptr(tag).to_string_lossy().into_owned();
        let payload = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(data, len).to_vec()
        };
        match session.0.store(tag, payload, element_width) {
            Ok(()) => CfslStatus::Ok,
            Err(e) => fail(guard_status(&e), e),
        }
    })
}

/// Copies the target set pixels out once every support set was consumed.
///
/// # Safety
/// `pixels` must hold `pixels_capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn cfsl_session_request_target(
    session: *mut CfslSession,
    pixels: *mut u8,
    pixels_capacity: usize,
) -> CfslStatus {
    guarded(|| {
        let Some(session) = session.as_mut() else {
            return fail(CfslStatus::NullPointer, "session is null");
        };
        if pixels.is_null() {
            return fail(CfslStatus::NullPointer, "null buffer");
        }
        let bytes = session.0.target_len() * session.0.pack().sample_bytes();
        if pixels_capacity < bytes {
            return fail(CfslStatus::BufferTooSmall, "target buffer too small");
        }
        match session.0.request_target() {
            Ok(view) => match copy_out(&view.to_contiguous(), pixels, pixels_capacity) {
                Ok(()) => CfslStatus::Ok,
                Err(s) => s,
            },
            Err(e) => fail(guard_status(&e), e),
        }
    })
}

/// Scores predictions for the target set, in target order.
///
/// # Safety
/// `predictions` must hold `count` labels and `score` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cfsl_session_submit(
    session: *mut CfslSession,
    predictions: *const u32,
    count: usize,
    score: *mut CfslScore,
) -> CfslStatus {
    guarded(|| {
        let Some(session) = session.as_mut() else {
            return fail(CfslStatus::NullPointer, "session is null");
        };
        if score.is_null() || (predictions.is_null() && count > 0) {
            return fail(CfslStatus::NullPointer, "null argument");
        }
        let predicted = if count == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(predictions, count)
        };
        match session.0.submit_predictions(predicted) {
            Ok(s) => {
                *score = CfslScore {
                    accuracy: s.accuracy,
                    correct: s.correct as u64,
                    total: s.total as u64,
                    atm: s.atm.atm,
                    memory_bytes: s.atm.memory_bytes,
                    episode_index: s.episode_index,
                };
                CfslStatus::Ok
            }
            Err(e) => fail(guard_status(&e), e),
        }
    })
}
