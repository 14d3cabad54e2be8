//! C ABI over the faithsplat renderer and EIG maps.
//!
//! Scenes and ledgers are opaque handles created by `fs_*_load` or
//! `fs_*_from_*` and released with the matching `fs_*_free`. Every fallible
//! call returns an [`FsStatus`]; on failure the message is available from
//! [`fs_last_error_message`] on the same thread until the next failing call.
//! Images are row-major `double` buffers, RGB interleaved for color.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use faithsplat::fisher::{build_ledger, eig_map, FisherLedger};
use faithsplat::formats::load_ledger;
use faithsplat::persist::load_cloud;
use faithsplat::rasterizer::render;
use faithsplat::scene::{Camera, GaussianCloud, Group, Scene, SkyModel};
use faithsplat::Error;
use nalgebra::{Matrix3, Vector3};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FsStatus {
    Ok = 0,
    NullPointer = 1,
    Io = 2,
    Parse = 3,
    Version = 4,
    MissingPose = 5,
    Shape = 6,
    InvalidArgument = 7,
    UnknownKey = 8,
    BadValue = 9,
    Diverged = 10,
    Restorer = 11,
    Other = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

impl From<&Error> for FsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => FsStatus::Io,
            Error::Parse { .. } => FsStatus::Parse,
            Error::Version { .. } => FsStatus::Version,
            Error::MissingPose { .. } => FsStatus::MissingPose,
            Error::Shape { .. } => FsStatus::Shape,
            Error::InvalidArgument { .. } => FsStatus::InvalidArgument,
            Error::UnknownKey(_) => FsStatus::UnknownKey,
            Error::BadValue { .. } => FsStatus::BadValue,
            Error::Diverged { .. } => FsStatus::Diverged,
            Error::Restorer { .. } => FsStatus::Restorer,
            Error::Other(_) => FsStatus::Other,
        }
    }
}

/// Pinhole camera. `rotation` is the row-major world-to-camera rotation and
/// `translation` the world-to-camera translation; +x right, +y down, +z
/// forward.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FsCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub timestamp: u32,
}

impl From<&FsCamera> for Camera {
    fn from(c: &FsCamera) -> Self {
        Camera {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width as usize,
            height: c.height as usize,
            rotation: Matrix3::from_row_slice(&c.rotation),
            translation: Vector3::from_column_slice(&c.translation),
            timestamp: c.timestamp as usize,
        }
    }
}

/// Opaque scene handle.
pub struct FsScene(Scene);

/// Opaque Fisher ledger handle.
pub struct FsLedger(FisherLedger);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Status(FsStatus, String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn null(name: &str) -> Failure {
    Failure::Status(FsStatus::NullPointer, format!("`{name}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FsStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(format!("{}: {e}", e.code()));
            FsStatus::from(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            FsStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, name: &str) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(FsStatus::InvalidArgument, format!("`{name}` is not UTF-8")))?;
    Ok(Path::new(s))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn out_buffer<'a>(p: *mut f64, len: usize, need: usize, name: &str) -> Result<Option<&'a mut [f64]>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    if len < need {
        return Err(Failure::Status(
            FsStatus::BufferTooSmall,
            format!("`{name}` holds {len} values, {need} required"),
        ));
    }
    Ok(Some(std::slice::from_raw_parts_mut(p, need)))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failing call on this thread; empty if none. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn fs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Camera at the origin looking down +z with a centered principal point.
#[no_mangle]
pub extern "C" fn fs_camera_looking_forward(width: u32, height: u32, focal: f64) -> FsCamera {
    FsCamera {
        fx: focal,
        fy: focal,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
        rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        translation: [0.0; 3],
        timestamp: 0,
    }
}

/// Load a scene from a `.fsplat` file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fs_scene_load(path: *const c_char, out: *mut *mut FsScene) -> FsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        store(out, FsScene(load_cloud(path)?))
    })
}

/// Build a static scene from `count` packed parameter blocks of
/// `fs_param_dim(sh_degree)` values each, all in the background group.
///
/// # Safety
/// `params` must hold `count * fs_param_dim(sh_degree)` values, `sky` three
/// values, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_scene_from_params(
    params: *const f64,
    count: usize,
    sh_degree: u8,
    sky: *const f64,
    out: *mut *mut FsScene,
) -> FsStatus {
    guard(|| {
        if sh_degree > 2 {
            return Err(Failure::Status(
                FsStatus::InvalidArgument,
                format!("sh_degree {sh_degree} not in 0..=2"),
            ));
        }
        let sky = std::slice::from_raw_parts(ref_arg(sky, "sky")?, 3);
        let len = count * faithsplat::scene::param_dim(sh_degree);
        let params = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(ref_arg(params, "params")?, len).to_vec()
        };
        let cloud = GaussianCloud::from_parts(sh_degree, params, vec![Group::Background; count])?;
        store(out, FsScene(Scene::new(cloud, Vec::new(), SkyModel::new([sky[0], sky[1], sky[2]]))))
    })
}

/// Parameters per Gaussian for an SH degree in 0..=2, or 0 otherwise.
#[no_mangle]
pub extern "C" fn fs_param_dim(sh_degree: u8) -> usize {
    if sh_degree > 2 {
        0
    } else {
        faithsplat::scene::param_dim(sh_degree)
    }
}

/// Number of Gaussians in the scene; 0 for a null handle.
///
/// # Safety
/// `scene` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_scene_len(scene: *const FsScene) -> usize {
    scene.as_ref().map_or(0, |s| s.0.cloud.len())
}

/// # Safety
/// `scene` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fs_scene_free(scene: *mut FsScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Render `camera` at its timestamp. `color` receives `3·w·h` values;
/// `depth` and `opacity` receive `w·h` values each and may be null.
///
/// # Safety
/// Handles must be live and each non-null buffer must hold its stated length.
#[no_mangle]
pub unsafe extern "C" fn fs_render(
    scene: *const FsScene,
    camera: *const FsCamera,
    color: *mut f64,
    color_len: usize,
    depth: *mut f64,
    depth_len: usize,
    opacity: *mut f64,
    opacity_len: usize,
) -> FsStatus {
    guard(|| {
        let scene = &ref_arg(scene, "scene")?.0;
        let cam = Camera::from(ref_arg(camera, "camera")?);
        let n = cam.pixel_count();
        let color = out_buffer(color, color_len, 3 * n, "color")?.ok_or_else(|| null("color"))?;
        let depth = out_buffer(depth, depth_len, n, "depth")?;
        let opacity = out_buffer(opacity, opacity_len, n, "opacity")?;
        let r = render(scene, &cam, cam.timestamp)?;
        color.copy_from_slice(&r.color.data);
        if let Some(d) = depth {
            d.copy_from_slice(&r.depth.data);
        }
        if let Some(o) = opacity {
            o.copy_from_slice(&r.opacity.data);
        }
        Ok(())
    })
}

/// Load a ledger from a `.fledg` file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fs_ledger_load(path: *const c_char, out: *mut *mut FsLedger) -> FsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        store(out, FsLedger(load_ledger(path)?))
    })
}

/// Accumulate and finalize a ledger over `count` training cameras.
///
/// # Safety
/// `scene` must be live, `cameras` must hold `count` cameras and `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_ledger_build(
    scene: *const FsScene,
    cameras: *const FsCamera,
    count: usize,
    out: *mut *mut FsLedger,
) -> FsStatus {
    guard(|| {
        let scene = &ref_arg(scene, "scene")?.0;
        let cams: Vec<Camera> = if count == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(ref_arg(cameras, "cameras")?, count)
                .iter()
                .map(Camera::from)
                .collect()
        };
        store(out, FsLedger(build_ledger(scene, &cams)?))
    })
}

/// Number of ledger entries (one per Gaussian); 0 for a null handle.
///
/// # Safety
/// `ledger` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_ledger_len(ledger: *const FsLedger) -> usize {
    ledger.as_ref().map_or(0, |l| l.0.len())
}

/// # Safety
/// `ledger` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fs_ledger_free(ledger: *mut FsLedger) {
    if !ledger.is_null() {
        drop(Box::from_raw(ledger));
    }
}

/// Pixel-wise EIG of `camera`. `raw` receives `w·h` values; `normalized`
/// may be null. `scale`, if non-null, receives the normalizer.
///
/// # Safety
/// Handles must be live and each non-null buffer must hold its stated length.
#[no_mangle]
pub unsafe extern "C" fn fs_eig_map(
    scene: *const FsScene,
    ledger: *const FsLedger,
    camera: *const FsCamera,
    raw: *mut f64,
    raw_len: usize,
    normalized: *mut f64,
    normalized_len: usize,
    scale: *mut f64,
) -> FsStatus {
    guard(|| {
        let scene = &ref_arg(scene, "scene")?.0;
        let ledger = &ref_arg(ledger, "ledger")?.0;
        let cam = Camera::from(ref_arg(camera, "camera")?);
        let n = cam.pixel_count();
        let raw = out_buffer(raw, raw_len, n, "raw")?.ok_or_else(|| null("raw"))?;
        let normalized = out_buffer(normalized, normalized_len, n, "normalized")?;
        let map = eig_map(scene, ledger, &cam)?;
        raw.copy_from_slice(&map.raw.data);
        if let Some(b) = normalized {
            b.copy_from_slice(&map.normalized.data);
        }
        if let Some(s) = scale.as_mut() {
            *s = map.scale;
        }
        Ok(())
    })
}
