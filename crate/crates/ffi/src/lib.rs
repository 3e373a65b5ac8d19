//! C ABI over `posevid-core`.
//!
//! Every fallible call returns a [`PvStatus`]; on failure the message is kept
//! per thread and read back with [`pv_last_error`]. Handles are opaque and
//! must be released with their `_free` function. Frames cross the boundary as
//! `f32` arrays laid out `[frame][y][x][rgb]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use posevid::dit::DenoiserModel;
use posevid::edm::{GuidanceConfig, NoiseSchedule};
use posevid::eval::{evaluate_clip, generate_future, ssim, TrackerConfig};
use posevid::harness::{load_checkpoint, pose_window, PoseSource, PoseVariant};
use posevid::se3::{pose6d_to_transform, transform_to_6d, Pose6D, RigidTransform};
use posevid::world::{generate_dataset, Dataset, DatasetConfig, Image, Split};
use posevid::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PvStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Geometry = 6,
    Numeric = 7,
    Data = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PvVariant {
    FullBody = 0,
    HeadOnly = 1,
    None = 2,
    CumulativeHead = 3,
    PerJointDelta = 4,
}

/// Where the driving poses of a generation come from.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PvPoseSource {
    /// The clip's own future poses.
    Same = 0,
    /// Another clip's future poses, given by `pose_clip`.
    OtherClip = 1,
    /// The last context pose held still.
    Static = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PvSplit {
    Train = 0,
    Val = 1,
    Test = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PvDatasetInfo {
    pub clips: usize,
    pub width: usize,
    pub height: usize,
    pub clip_len: usize,
    pub context_frames: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PvModelInfo {
    pub d: usize,
    pub depth: usize,
    pub past_frames: usize,
    pub future_frames: usize,
    pub parameters: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PvMetrics {
    pub ssim: f64,
    pub trans_error: f64,
    pub rot_error: f64,
    pub miou: f64,
    pub presence_accuracy: f64,
}

/// Sampler settings for [`pv_sample`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PvSampleOptions {
    pub variant: PvVariant,
    pub pose_source: PvPoseSource,
    /// Clip whose poses drive the generation when `pose_source` is `OtherClip`.
    pub pose_clip: usize,
    pub seed: u64,
    pub steps: usize,
    pub guidance_weight: f64,
}

/// Opaque dataset handle.
pub struct PvDataset(Dataset);

/// Opaque model handle.
pub struct PvModel(DenoiserModel);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PvStatus {
    match e {
        Error::Pose(_) => PvStatus::InvalidArgument,
        Error::Tensor(_) | Error::NonFiniteLoss { .. } => PvStatus::Numeric,
        Error::Config(_) => PvStatus::Config,
        Error::Geometry(_) => PvStatus::Geometry,
        Error::Data(_) => PvStatus::Data,
        Error::Io { .. } => PvStatus::Io,
        Error::Format { .. } => PvStatus::Format,
    }
}

struct Fail(PvStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PvStatus::NullArgument, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(PvStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PvStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            PvStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn images_from(data: &[f32], width: usize, height: usize, what: &str) -> Result<Vec<Image>, Fail> {
    let per = width * height * 3;
    if per == 0 || !data.len().is_multiple_of(per) {
        return Err(invalid(format!(
            "`{what}` length {} is not a whole number of {width}x{height} frames",
            data.len()
        )));
    }
    data.chunks(per)
        .map(|c| Image::new(width, height, c.to_vec()).map_err(Fail::from))
        .collect()
}

fn write_images(frames: &[Image], out: &mut [f32]) {
    let mut k = 0;
    for f in frames {
        out[k..k + f.data().len()].copy_from_slice(f.data());
        k += f.data().len();
    }
}

fn metrics_out(m: &posevid::eval::Metrics) -> PvMetrics {
    PvMetrics {
        ssim: m.ssim,
        trans_error: m.trans_error,
        rot_error: m.rot_error,
        miou: m.miou,
        presence_accuracy: m.presence_accuracy,
    }
}

fn variant_of(v: PvVariant) -> PoseVariant {
    match v {
        PvVariant::FullBody => PoseVariant::FullBody,
        PvVariant::HeadOnly => PoseVariant::HeadOnly,
        PvVariant::None => PoseVariant::None,
        PvVariant::CumulativeHead => PoseVariant::CumulativeHead,
        PvVariant::PerJointDelta => PoseVariant::PerJointDelta,
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Row-major 4×4 rigid transform to (tx, ty, tz, roll, pitch, yaw).
///
/// # Safety
/// `matrix` must point to 16 doubles and `out` to 6.
#[no_mangle]
pub unsafe extern "C" fn pv_pose_to_6d(matrix: *const f64, out: *mut f64) -> PvStatus {
    guard(|| {
        let m = slice(matrix, 16, "matrix")?;
        let out = slice_mut(out, 6, "out")?;
        if m[12..16] != [0.0, 0.0, 0.0, 1.0] {
            return Err(invalid("bottom row of a rigid transform must be 0 0 0 1"));
        }
        let rm12 = [m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10], m[3], m[7], m[11]];
        let t = RigidTransform::from_row_major12(&rm12).map_err(|e| Fail::from(Error::from(e)))?;
        out.copy_from_slice(&transform_to_6d(&t).to_array());
        Ok(())
    })
}

/// Inverse of [`pv_pose_to_6d`].
///
/// # Safety
/// `v` must point to 6 doubles and `matrix` to 16.
#[no_mangle]
pub unsafe extern "C" fn pv_pose_from_6d(v: *const f64, matrix: *mut f64) -> PvStatus {
    guard(|| {
        let v = slice(v, 6, "v")?;
        let out = slice_mut(matrix, 16, "matrix")?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invalid("pose vector has non-finite entries"));
        }
        let p = Pose6D::from_array(v.try_into().expect("length 6"));
        let m = pose6d_to_transform(&p).to_matrix4();
        for r in 0..4 {
            for c in 0..4 {
                out[4 * r + c] = m[(r, c)];
            }
        }
        Ok(())
    })
}

/// Renders a dataset into `out_dir`. `config_toml` may be null for the
/// default configuration.
///
/// # Safety
/// String arguments must be NUL-terminated or null.
#[no_mangle]
pub unsafe extern "C" fn pv_dataset_generate(
    config_toml: *const c_char,
    seed: u64,
    out_dir: *const c_char,
) -> PvStatus {
    guard(|| {
        let out = path_arg(out_dir, "out_dir")?;
        let cfg = if config_toml.is_null() {
            DatasetConfig::default()
        } else {
            let text = CStr::from_ptr(config_toml)
                .to_str()
                .map_err(|_| invalid("`config_toml` is not UTF-8"))?;
            toml::from_str(text).map_err(|e| Fail(PvStatus::Config, e.to_string()))?
        };
        generate_dataset(&cfg, seed, &out)?;
        Ok(())
    })
}

/// Opens a dataset directory.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pv_dataset_open(path: *const c_char, out: *mut *mut PvDataset) -> PvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ds = Dataset::open(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(PvDataset(ds)));
        Ok(())
    })
}

/// Releases a dataset handle; null is ignored.
///
/// # Safety
/// `ds` must come from [`pv_dataset_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pv_dataset_free(ds: *mut PvDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pv_dataset_info(ds: *const PvDataset, out: *mut PvDatasetInfo) -> PvStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = ds.0.config();
        *out = PvDatasetInfo {
            clips: ds.0.manifest().clips.len(),
            width: c.width,
            height: c.height,
            clip_len: c.clip_len,
            context_frames: c.context_frames,
        };
        Ok(())
    })
}

/// Writes up to `capacity` clip ids of `split` into `ids` and their total
/// count into `count`. Pass a null `ids` to query the count.
///
/// # Safety
/// `ds` must be live; `ids` must hold `capacity` entries when non-null.
#[no_mangle]
pub unsafe extern "C" fn pv_dataset_split(
    ds: *const PvDataset,
    split: PvSplit,
    ids: *mut usize,
    capacity: usize,
    count: *mut usize,
) -> PvStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        let count = count.as_mut().ok_or_else(|| null("count"))?;
        let split = match split {
            PvSplit::Train => Split::Train,
            PvSplit::Val => Split::Val,
            PvSplit::Test => Split::Test,
        };
        let all = ds.0.ids(split);
        *count = all.len();
        if !ids.is_null() {
            let out = slice_mut(ids, capacity, "ids")?;
            let n = all.len().min(capacity);
            out[..n].copy_from_slice(&all[..n]);
        }
        Ok(())
    })
}

/// Copies every frame of a clip into `out`, which must hold exactly
/// `clip_len · height · width · 3` floats.
///
/// # Safety
/// `ds` must be live; `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn pv_dataset_frames(ds: *const PvDataset, clip: usize, out: *mut f32, len: usize) -> PvStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        let out = slice_mut(out, len, "out")?;
        let rec = ds.0.load_clip(clip)?;
        let need: usize = rec.frames.iter().map(|f| f.data().len()).sum();
        if len != need {
            return Err(invalid(format!("clip {clip} has {need} values, buffer holds {len}")));
        }
        write_images(&rec.frames, out);
        Ok(())
    })
}

/// Loads a checkpoint directory written by the trainer.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pv_model_load(dir: *const c_char, out: *mut *mut PvModel) -> PvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let (model, _) = load_checkpoint(&path_arg(dir, "dir")?)?;
        *out = Box::into_raw(Box::new(PvModel(model)));
        Ok(())
    })
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must come from [`pv_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pv_model_free(model: *mut PvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pv_model_info(model: *const PvModel, out: *mut PvModelInfo) -> PvStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = &m.0.config;
        *out = PvModelInfo {
            d: c.d,
            depth: c.depth,
            past_frames: c.past_frames,
            future_frames: c.future_frames,
            parameters: m.0.store.num_scalars(),
        };
        Ok(())
    })
}

/// Default sampler settings: full-body control from the clip itself, seed
/// 0, 18 steps, guidance weight 2.
#[no_mangle]
pub extern "C" fn pv_sample_options_default() -> PvSampleOptions {
    PvSampleOptions {
        variant: PvVariant::FullBody,
        pose_source: PvPoseSource::Same,
        pose_clip: 0,
        seed: 0,
        steps: NoiseSchedule::default().steps,
        guidance_weight: GuidanceConfig::default().weight,
    }
}

/// Generates the future frames of `clip` from its context. `out` must hold
/// exactly `future_frames · height · width · 3` floats.
///
/// # Safety
/// Handles must be live; `opts` readable; `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn pv_sample(
    model: *const PvModel,
    ds: *const PvDataset,
    clip: usize,
    opts: *const PvSampleOptions,
    out: *mut f32,
    len: usize,
) -> PvStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        let o = opts.as_ref().ok_or_else(|| null("opts"))?;
        let out = slice_mut(out, len, "out")?;
        let c = ds.0.config();
        let need = m.0.config.future_frames * c.width * c.height * 3;
        if len != need {
            return Err(invalid(format!("generation has {need} values, buffer holds {len}")));
        }
        let source = match o.pose_source {
            PvPoseSource::Same => PoseSource::SameClip,
            PvPoseSource::OtherClip => PoseSource::Clip(o.pose_clip),
            PvPoseSource::Static => PoseSource::Static,
        };
        let window = pose_window(&ds.0, clip, &source)?;
        let control = variant_of(o.variant).control(&window);
        let schedule = NoiseSchedule {
            steps: o.steps,
            ..NoiseSchedule::default()
        };
        schedule.validate()?;
        let guidance = GuidanceConfig {
            weight: o.guidance_weight,
            ..GuidanceConfig::default()
        };
        guidance.validate()?;
        let rec = ds.0.load_clip(clip)?;
        let frames = generate_future(
            &m.0,
            &ds.0.tokenizer(),
            &rec.frames[..rec.context_frames],
            &control,
            &schedule,
            &guidance,
            o.seed,
        )?;
        write_images(&frames, out);
        Ok(())
    })
}

/// SSIM ×100 between two images of `width × height` RGB floats.
///
/// # Safety
/// `a` and `b` must each hold `width · height · 3` floats; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pv_ssim(a: *const f32, b: *const f32, width: usize, height: usize, out: *mut f64) -> PvStatus {
    guard(|| {
        let n = width * height * 3;
        let a = images_from(slice(a, n, "a")?, width, height, "a")?;
        let b = images_from(slice(b, n, "b")?, width, height, "b")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ssim(&a[0], &b[0])?;
        Ok(())
    })
}

/// Scores generated future frames of `clip` against its ground truth:
/// SSIM, recovered-camera errors and arm-mask agreement.
///
/// # Safety
/// `ds` must be live; `frames` must hold `len` floats; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pv_evaluate_clip(
    ds: *const PvDataset,
    clip: usize,
    frames: *const f32,
    len: usize,
    out: *mut PvMetrics,
) -> PvStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = ds.0.config();
        let generated = images_from(slice(frames, len, "frames")?, c.width, c.height, "frames")?;
        let rec = ds.0.load_clip(clip)?;
        let m = evaluate_clip(ds.0.scene(), &rec, clip, &generated, &TrackerConfig::default())?;
        *out = metrics_out(&m.metrics);
        Ok(())
    })
}
